"""Multi-scale feature extraction.

An encoder trunk (the built-in toy CNN or any external module) feeds an
ASPP-style head whose dilated branches are kept apart: each branch emits
its own ``d``-channel slab, so the output carries one feature map per scale
instead of the usual summed map.

Tensor layout used throughout the package is ``(B, S, d, H_r, W_r)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError

DEEPLAB_RATES = (6, 12, 18, 24)
TOY_RATES = (1, 2, 3, 4)


@dataclass
class BackboneConfig:
    num_scales: int = 4
    feature_dim: int = 16
    reduction: int = 8
    atrous_rates: tuple[int, ...] = TOY_RATES
    encoder_id: str = "toy-cnn"
    trunk_channels: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3

    def __post_init__(self):
        self.atrous_rates = tuple(int(r) for r in self.atrous_rates)
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        self.validate()

    def validate(self) -> None:
        if self.num_scales < 1 or self.feature_dim < 1 or self.reduction < 1:
            raise ConfigError("num_scales, feature_dim and reduction must be >= 1")
        if len(self.atrous_rates) != self.num_scales:
            raise ConfigError(
                f"expected {self.num_scales} atrous rates, got {len(self.atrous_rates)}"
            )
        if any(b <= a for a, b in zip(self.atrous_rates, self.atrous_rates[1:])):
            raise ConfigError("atrous_rates must be strictly increasing")
        if self.atrous_rates[0] < 1:
            raise ConfigError("atrous rates must be positive")
        if self.encoder_id not in ("toy-cnn", "external"):
            raise ConfigError(f"unknown encoder_id {self.encoder_id!r}")
        if self.encoder_id == "toy-cnn" and 2 ** len(self.trunk_channels) != self.reduction:
            raise ConfigError(
                "toy-cnn uses one stride-2 block per trunk channel entry; "
                f"{len(self.trunk_channels)} blocks cannot give reduction {self.reduction}"
            )

    @property
    def atrous_ratios(self) -> tuple[Fraction, ...]:
        """Rate of each scale divided by the rate of the first scale."""
        base = self.atrous_rates[0]
        return tuple(Fraction(r, base) for r in self.atrous_rates)

    def feature_shape(self, height: int, width: int) -> tuple[int, int]:
        return math.ceil(height / self.reduction), math.ceil(width / self.reduction)


@dataclass
class MultiScaleFeatureMap:
    """Backbone output for one image, stored H_r x W_r x S x d."""

    data: np.ndarray
    source_shape: tuple[int, int] = field(default=(0, 0))

    @classmethod
    def from_tensor(cls, feats: torch.Tensor, source_shape) -> "MultiScaleFeatureMap":
        # (S, d, H, W) -> (H, W, S, d)
        return cls(feats.detach().cpu().numpy().transpose(2, 3, 0, 1).copy(), tuple(source_shape))

    def to_tensor(self, dtype=torch.float64) -> torch.Tensor:
        """Batched ``(1, S, d, H_r, W_r)`` tensor."""
        return torch.as_tensor(self.data.transpose(2, 3, 0, 1).copy(), dtype=dtype)[None]

    @property
    def num_scales(self) -> int:
        return self.data.shape[2]


class ToyEncoder(nn.Module):
    """Stride-2 conv blocks; each 3x3/s2/p1 conv maps n pixels to ceil(n/2)."""

    def __init__(self, in_channels: int = 3, channels=(16, 32, 64)):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU()]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.body(x)


class ASPPConcat(nn.Module):
    """Parallel dilated 3x3 convolutions whose outputs are stacked, not summed."""

    def __init__(self, in_channels: int, feature_dim: int, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, feature_dim, 3, padding=r, dilation=r) for r in rates
        )

    def forward(self, trunk):
        return torch.stack([branch(trunk) for branch in self.branches], dim=1)


class MultiScaleBackbone(nn.Module):
    """Trunk + concatenating ASPP head. ``forward`` returns ``(B, S, d, H_r, W_r)``.

    An external trunk must map ``(B, 3, H, W)`` to ``(B, C_t, ceil(H/r), ceil(W/r))``
    and expose ``out_channels``.
    """

    def __init__(self, cfg: BackboneConfig, trunk: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        if cfg.encoder_id == "external":
            if trunk is None:
                raise ConfigError("encoder_id 'external' requires a trunk module")
            self.trunk = trunk
        else:
            self.trunk = ToyEncoder(cfg.in_channels, cfg.trunk_channels)
        self.aspp = ASPPConcat(self.trunk.out_channels, cfg.feature_dim, cfg.atrous_rates)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[1] != self.cfg.in_channels:
            raise ConfigError(
                f"image has {images.shape[1]} channels, backbone expects {self.cfg.in_channels}"
            )
        return self.aspp(self.trunk(images))


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array -> (1, 3, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)[None]


def extract_features(image: np.ndarray, backbone: MultiScaleBackbone) -> MultiScaleFeatureMap:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != backbone.cfg.in_channels:
        raise ConfigError(
            f"expected H x W x {backbone.cfg.in_channels} image, got shape {image.shape}"
        )
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        feats = backbone(image_to_tensor(image, dtype))[0]
    return MultiScaleFeatureMap.from_tensor(feats, image.shape[:2])


# -- resampling -------------------------------------------------------------

def _coords(n_out: int, n_in: int, mode: str, stride: float | None = None) -> np.ndarray:
    idx = np.arange(n_out, dtype=float)
    if mode == "align_corners":
        c = np.zeros(n_out) if n_out == 1 else idx * (n_in - 1) / (n_out - 1)
    elif mode == "half_pixel":
        c = (idx + 0.5) * n_in / n_out - 0.5
    elif mode == "stride":
        c = idx / stride
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    return np.clip(c, 0.0, n_in - 1)


def _lerp_axis(values, coords: np.ndarray, axis: int):
    n_in = values.shape[axis]
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    shape = [1] * values.ndim
    shape[axis] = len(coords)
    if isinstance(values, torch.Tensor):
        a = values.index_select(axis, torch.as_tensor(lo))
        b = values.index_select(axis, torch.as_tensor(hi))
        f = torch.as_tensor(frac, dtype=values.dtype).reshape(shape)
    else:
        a = np.take(values, lo, axis=axis)
        b = np.take(values, hi, axis=axis)
        f = frac.reshape(shape)
    # a + f (b - a) keeps constant inputs exact
    return a + f * (b - a)


def resize_bilinear(values, target, mode: str = "align_corners", stride: float | None = None,
                    axes=(-2, -1)):
    ay, ax = (a % values.ndim for a in axes)
    h, w = values.shape[ay], values.shape[ax]
    H, W = target
    if not isinstance(values, torch.Tensor):
        values = np.asarray(values, dtype=float)
    out = _lerp_axis(values, _coords(H, h, mode, stride), ay)
    return _lerp_axis(out, _coords(W, w, mode, stride), ax)


def upsample_map(values, target, mode: str = "align_corners", stride: float | None = None):
    """Bilinear resize of the trailing two axes of ``values`` to ``target``.

    ``align_corners`` maps corner samples onto corner pixels. ``stride`` maps
    output pixel ``y`` to source coordinate ``y / stride``, which is where a
    strided convolution with symmetric padding centres its outputs.
    Works on numpy arrays and (differentiably) on torch tensors.
    """
    return resize_bilinear(values, target, mode, stride)


def downscale_image(image: np.ndarray, ratio) -> np.ndarray:
    """Bilinear resample of an H x W x C image to round(H/ratio) x round(W/ratio)."""
    ratio = float(ratio)
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    H, W = image.shape[:2]
    h = max(1, int(math.floor(H / ratio + 0.5)))
    w = max(1, int(math.floor(W / ratio + 0.5)))
    if (h, w) == (H, W):
        return image.copy()
    out = resize_bilinear(image.astype(float), (h, w), "half_pixel", axes=(0, 1))
    return out.astype(image.dtype, copy=False)


def downscale_labels(labels: np.ndarray, out_hw) -> np.ndarray:
    """Nearest-neighbour label resize (pixel ``floor(i * H / h)``)."""
    H, W = labels.shape
    h, w = out_hw
    ys = np.minimum((np.arange(h) * H) // h, H - 1)
    xs = np.minimum((np.arange(w) * W) // w, W - 1)
    return labels[np.ix_(ys, xs)]


def labels_at_feature_grid(labels: np.ndarray, reduction: int) -> np.ndarray:
    """Label at each feature location (the pixel a stride-r conv output is centred on)."""
    return labels[::reduction, ::reduction]
