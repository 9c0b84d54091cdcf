"""The composed segmentation model: backbone, prototype bank, heads and optional groups."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, MultiScaleBackbone, image_to_tensor, upsample_map
from .errors import ConfigError
from .grouping import DEFAULT_DELTA, DEFAULT_GROUPS, GroupModel, group_activation_map
from .prototypes import (
    DEFAULT_EPS,
    PrototypeBank,
    activation_map,
    class_scores,
    dedup_prototypes,
    init_head,
    project_prototypes,
)

STAGES = ("init", "projected", "grouped")


@dataclass
class PrototypeConfig:
    per_scale: int = 3
    groups_per_class: int = DEFAULT_GROUPS
    eps: float = DEFAULT_EPS
    delta: float = DEFAULT_DELTA
    alpha: float = 0.05
    class_restricted_projection: bool = True
    negate_distances: bool = False

    def __post_init__(self):
        if self.per_scale < 1 or self.groups_per_class < 1:
            raise ConfigError("per_scale and groups_per_class must be >= 1")
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in [0, 1)")


class MultiScaleProtoNet(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, num_classes: int,
                 proto_cfg: PrototypeConfig | None = None, seed: int = 0,
                 dtype=torch.float32, trunk: nn.Module | None = None):
        super().__init__()
        self.proto_cfg = proto_cfg or PrototypeConfig()
        self.num_classes = num_classes
        self.seed = seed
        torch.manual_seed(seed)
        self.backbone = MultiScaleBackbone(backbone_cfg, trunk).to(dtype)
        gen = torch.Generator().manual_seed(seed + 1)
        self.bank = PrototypeBank(num_classes, backbone_cfg.num_scales, self.proto_cfg.per_scale,
                                  backbone_cfg.feature_dim, generator=gen, dtype=dtype)
        self.head_proto = init_head(self.bank, num_classes)
        self.groups: GroupModel | None = None
        self.raw_groups: GroupModel | None = None  # pre-threshold copy
        self.stage = "init"

    @property
    def dtype(self):
        return self.bank.vectors.dtype

    @property
    def reduction(self) -> int:
        return self.backbone.cfg.reduction

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "trunk": list(self.backbone.trunk.parameters()),
            "aspp": list(self.backbone.aspp.parameters()),
            "prototypes": [self.bank.vectors],
            "head_proto": [self.head_proto.weight],
        }
        if self.groups is not None:
            groups["group_weights"] = [self.groups.weights]
            groups["group_head"] = [self.groups.head]
        return groups

    def init_groups(self, seed: int) -> GroupModel:
        gen = torch.Generator().manual_seed(seed)
        self.groups = GroupModel(self.bank, self.proto_cfg.groups_per_class,
                                 self.proto_cfg.delta, generator=gen)
        return self.groups

    # -- forward passes --------------------------------------------------

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images - 0.5)

    def prototype_activations(self, feats: torch.Tensor) -> torch.Tensor:
        return activation_map(feats, self.bank, self.proto_cfg.eps)

    def scores_from_features(self, feats: torch.Tensor, use_groups: bool | None = None):
        acts = self.prototype_activations(feats)
        if use_groups is None:
            use_groups = self.groups is not None
        if use_groups:
            g = group_activation_map(acts, self.groups)
            return torch.einsum("cn,bnhw->bchw", self.groups.head, g)
        return class_scores(acts, self.head_proto.weight, self.bank.alive)

    def forward(self, images: torch.Tensor, use_groups: bool | None = None) -> torch.Tensor:
        """Class scores at feature resolution, (B, C, H_r, W_r)."""
        return self.scores_from_features(self.features(images), use_groups)

    def upsample(self, maps: torch.Tensor, target_hw) -> torch.Tensor:
        return upsample_map(maps, target_hw, mode="stride", stride=self.reduction)

    def _image_tensor(self, image: np.ndarray) -> torch.Tensor:
        return image_to_tensor(np.asarray(image), self.dtype)

    @torch.no_grad()
    def predict(self, image: np.ndarray, use_groups: bool | None = None) -> np.ndarray:
        scores = self(self._image_tensor(image), use_groups)
        full = self.upsample(scores, image.shape[:2])
        return full[0].argmax(0).numpy().astype(np.uint8)

    @torch.no_grad()
    def prototype_maps(self, image: np.ndarray, upsample: bool = True) -> np.ndarray:
        """(P, H, W) prototype activations for one image (dead prototypes are 0)."""
        acts = self.prototype_activations(self.features(self._image_tensor(image)))
        if upsample:
            acts = self.upsample(acts, image.shape[:2])
        return acts[0].numpy()

    @torch.no_grad()
    def scale_features(self, image: np.ndarray) -> torch.Tensor:
        return self.features(self._image_tensor(image))[0]

    @torch.no_grad()
    def group_maps(self, image: np.ndarray, upsample: bool = True) -> np.ndarray:
        if self.groups is None:
            raise ConfigError("model has no groups")
        acts = self.prototype_activations(self.features(self._image_tensor(image)))
        g = group_activation_map(acts, self.groups)
        if upsample:
            g = self.upsample(g, image.shape[:2])
        return g[0].numpy()

    def iter_features(self, dataset):
        """Yield ``(index, feats (S, d, H_r, W_r), grid labels)`` without augmentation."""
        r = self.reduction
        for i, sample in enumerate(dataset):
            yield i, self.scale_features(sample.image), sample.labels[::r, ::r]

    # -- stage-1 post-processing ------------------------------------------

    def project_and_dedup(self, dataset):
        _, records = project_prototypes(self.bank, self.iter_features(dataset),
                                        self.proto_cfg.class_restricted_projection)
        dedup_prototypes(self.bank)
        self.stage = "projected"
        return records
