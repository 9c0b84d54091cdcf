"""Scale-specific prototype layer, its class-assigned head, projection and dedup.

Prototype ``rho`` of class ``c``, scale ``s`` and slot ``m`` lives at global
index ``rho = c * S * M + s * M + m``.  Activation maps are ``(B, P, H_r, W_r)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from .backbone import MultiScaleFeatureMap, upsample_map
from .errors import ProjectionError

DEFAULT_EPS = 1e-4


def log_activation(sq_dist, eps: float = DEFAULT_EPS):
    """log((D + 1) / (D + eps)) for squared distance D."""
    if isinstance(sq_dist, torch.Tensor):
        return torch.log(sq_dist + 1.0) - torch.log(sq_dist + eps)
    sq_dist = np.asarray(sq_dist, dtype=float)
    return np.log(sq_dist + 1.0) - np.log(sq_dist + eps)


def prototype_activation(z, p, eps: float = DEFAULT_EPS):
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if isinstance(z, torch.Tensor) or isinstance(p, torch.Tensor):
        z, p = torch.as_tensor(z), torch.as_tensor(p)
        if not (torch.isfinite(z).all() and torch.isfinite(p).all()):
            raise ValueError("non-finite input to prototype_activation")
        return log_activation(((z - p) ** 2).sum(-1), eps)
    z, p = np.asarray(z, dtype=float), np.asarray(p, dtype=float)
    if not (np.isfinite(z).all() and np.isfinite(p).all()):
        raise ValueError("non-finite input to prototype_activation")
    return float(log_activation(((z - p) ** 2).sum(-1), eps))


class PrototypeBank(nn.Module):
    """Learnable prototype vectors plus class/scale assignment and projection provenance.

    Dead prototypes (removed by dedup) are masked rather than deleted so that
    head and group index spaces stay fixed for the whole run.
    """

    def __init__(self, num_classes: int, num_scales: int, per_scale: int, dim: int,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        self.num_classes = num_classes
        self.num_scales = num_scales
        self.per_scale = per_scale
        n = num_classes * num_scales * per_scale
        self.vectors = nn.Parameter(torch.rand(n, dim, generator=generator, dtype=dtype))
        idx = torch.arange(n)
        self.register_buffer("class_of", idx // (num_scales * per_scale))
        self.register_buffer("scale_of", (idx // per_scale) % num_scales)
        self.register_buffer("alive", torch.ones(n, dtype=torch.bool))
        # (image id, row, col, scale); -1 until projected
        self.register_buffer("provenance", torch.full((n, 4), -1, dtype=torch.int64))

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def projected(self) -> bool:
        return bool((self.provenance[:, 0] >= 0).all())

    def class_indices(self, c: int) -> torch.Tensor:
        """Global indices of P_c, ordered by (scale, slot)."""
        k = self.num_scales * self.per_scale
        return torch.arange(c * k, (c + 1) * k)

    def cell_indices(self, c: int, s: int) -> torch.Tensor:
        start = (c * self.num_scales + s) * self.per_scale
        return torch.arange(start, start + self.per_scale)


class ClassificationHead(nn.Module):
    """Linear map from all C*S*M prototype activations to C class scores."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(weight)

    @property
    def frozen(self) -> bool:
        return not self.weight.requires_grad

    @frozen.setter
    def frozen(self, value: bool):
        self.weight.requires_grad_(not value)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def assignment_head(owner: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """1 where column ``j`` is owned by row class ``c``, -0.5 elsewhere."""
    rows = torch.arange(num_classes)[:, None]
    w = torch.full((num_classes, len(owner)), -0.5, dtype=dtype)
    w[rows == owner[None, :]] = 1.0
    return w


def init_head(bank: PrototypeBank, num_classes: int) -> ClassificationHead:
    head = ClassificationHead(assignment_head(bank.class_of, num_classes, bank.vectors.dtype))
    head.frozen = True
    return head


def _as_batched(feats) -> torch.Tensor:
    if isinstance(feats, MultiScaleFeatureMap):
        return feats.to_tensor()
    return feats


def squared_distances(feats, bank: PrototypeBank) -> torch.Tensor:
    """(B, S, d, H, W) features -> (B, P, H, W) squared distance to each prototype."""
    feats = _as_batched(feats)
    if feats.shape[2] != bank.dim:
        raise ValueError(f"feature dim {feats.shape[2]} != prototype dim {bank.dim}")
    vecs = bank.vectors.to(feats.dtype)
    z = feats[:, bank.scale_of]  # (B, P, d, H, W)
    return ((z - vecs[None, :, :, None, None]) ** 2).sum(2)


def activation_map(feats, bank: PrototypeBank, eps: float = DEFAULT_EPS) -> torch.Tensor:
    acts = log_activation(squared_distances(feats, bank), eps)
    return acts * bank.alive.to(acts.dtype)[None, :, None, None]


def class_scores(acts: torch.Tensor, weight: torch.Tensor, alive=None) -> torch.Tensor:
    """Per-position linear map (B, K, H, W) -> (B, C, H, W)."""
    if alive is not None:
        weight = weight * alive.to(weight.dtype)[None, :]
    return torch.einsum("ck,bkhw->bchw", weight.to(acts.dtype), acts)


def segment(feats, bank: PrototypeBank, head: ClassificationHead, target_shape,
            eps: float = DEFAULT_EPS, stride: float | None = None) -> torch.Tensor:
    """Class score map (B, C, H, W) at ``target_shape``.

    ``stride`` selects stride-aligned upsampling (see ``upsample_map``);
    without it corners are aligned.
    """
    scores = class_scores(activation_map(feats, bank, eps), head.weight, bank.alive)
    mode = "stride" if stride else "align_corners"
    return upsample_map(scores, target_shape, mode=mode, stride=stride)


# -- projection ---------------------------------------------------------------

@dataclass
class ProjectionRecord:
    prototype: int
    image: int
    row: int
    col: int
    scale: int
    distance: float


def project_prototypes(bank: PrototypeBank, feature_source: Iterable,
                       class_restricted: bool = True, ignore_index: int = 255):
    """Replace every alive prototype by its nearest same-scale training feature vector.

    ``feature_source`` yields ``(image_id, feats, grid_labels)`` with ``feats``
    shaped (S, d, H_r, W_r) and ``grid_labels`` (H_r, W_r).  With
    ``class_restricted`` the candidates for a class-c prototype are the
    positions labelled c.  Ties keep the first candidate in (image, row-major)
    order.
    """
    n = len(bank)
    vecs = bank.vectors.detach()
    best_d = torch.full((n,), float("inf"), dtype=torch.float64)
    best_loc = torch.full((n, 3), -1, dtype=torch.int64)
    best_vec = vecs.clone()
    S = bank.num_scales
    for image_id, feats, grid_labels in feature_source:
        feats = feats.detach().to(vecs.dtype)
        labels = torch.as_tensor(np.asarray(grid_labels))
        d, H, W = feats.shape[1:]
        for s in range(S):
            idx = torch.nonzero(bank.scale_of == s).flatten()
            z = feats[s].reshape(d, H * W).T  # (HW, d)
            dist = ((z[None, :, :] - vecs[idx][:, None, :]) ** 2).sum(-1).double()  # (P_s, HW)
            flat = labels.reshape(-1)
            if class_restricted:
                allowed = flat[None, :] == bank.class_of[idx][:, None]
            else:
                allowed = (flat != ignore_index)[None, :].expand(len(idx), -1)
            dist = torch.where(allowed, dist, torch.full_like(dist, float("inf")))
            dmin, pos = dist.min(dim=1)  # first minimum in row-major order
            better = dmin < best_d[idx]
            for k in torch.nonzero(better).flatten().tolist():
                rho = int(idx[k])
                p = int(pos[k])
                best_d[rho] = dmin[k]
                best_loc[rho] = torch.tensor([image_id, p // W, p % W])
                best_vec[rho] = z[p]
    records = []
    with torch.no_grad():
        for rho in range(n):
            if not bank.alive[rho]:
                continue
            if best_loc[rho, 0] < 0:
                raise ProjectionError(
                    f"no labelled training pixels for class {int(bank.class_of[rho])}"
                    if class_restricted else "no labelled training pixels"
                )
            bank.vectors[rho] = best_vec[rho]
            img, row, col = best_loc[rho].tolist()
            bank.provenance[rho] = torch.tensor([img, row, col, int(bank.scale_of[rho])])
            records.append(ProjectionRecord(rho, img, row, col, int(bank.scale_of[rho]),
                                            float(best_d[rho])))
    return bank, records


def dedup_prototypes(bank: PrototypeBank) -> PrototypeBank:
    """Kill all but the lowest-index prototype among those sharing (scale, provenance).

    Only the alive mask changes; scoring masks dead columns so the head stays as it was.
    """
    seen: dict[tuple, int] = {}
    with torch.no_grad():
        for rho in range(len(bank)):
            if not bank.alive[rho] or bank.provenance[rho, 0] < 0:
                continue
            key = tuple(bank.provenance[rho].tolist())
            if key in seen:
                bank.alive[rho] = False
            else:
                seen[key] = rho
    return bank


def nearest_patches(bank: PrototypeBank, feature_source: Iterable, prototype: int, k: int,
                    eps: float = DEFAULT_EPS):
    """Top-k (image, row, col, activation) of one prototype over all positions."""
    if not bank.alive[prototype]:
        raise ValueError(f"prototype {prototype} is dead")
    s = int(bank.scale_of[prototype])
    p = bank.vectors.detach()[prototype]
    hits = []
    for image_id, feats, _ in feature_source:
        z = feats[s].detach().to(p.dtype)
        act = log_activation(((z - p[:, None, None]) ** 2).sum(0), eps)
        W = act.shape[1]
        for pos, a in enumerate(act.reshape(-1).tolist()):
            hits.append((image_id, pos // W, pos % W, a))
    hits.sort(key=lambda h: -h[3])  # stable: ties keep scan order
    return hits[:k]
