"""Segmentation samples, a synthetic textured-shapes generator and a PNG folder loader.

On-disk layout::

    root/meta.json          {"num_classes", "ignore_index", "class_names", "count"}
    root/images/NNN.png     RGB uint8
    root/labels/NNN.png     single-channel class ids (ignore_index for unlabelled)
    root/parts/NNN.png      optional single-channel part ids (0 = no part)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IGNORE_INDEX = 255
RIM_PART = 1
INTERIOR_PART = 2
SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring")


class DatasetError(ValueError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # H x W uint8
    parts: np.ndarray | None = None  # H x W uint8, 0 = none
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise DatasetError(
                f"{self.name or 'sample'}: image {self.image.shape[:2]} vs labels {self.labels.shape}"
            )
        if self.parts is not None and self.parts.shape != self.labels.shape:
            raise DatasetError(f"{self.name or 'sample'}: parts shape {self.parts.shape}")


@dataclass
class ToyDatasetSpec:
    num_classes: int = 3
    image_size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (12, 48)
    texture_freqs: tuple[float, ...] = ()
    noise: float = 0.03
    seed: int = 0
    part_scheme: str = "border-interior"

    def __post_init__(self):
        self.shapes_per_image = tuple(self.shapes_per_image)
        self.size_range = tuple(self.size_range)
        if not self.texture_freqs:
            # cycles per pixel; finer textures for higher class ids
            self.texture_freqs = tuple(0.05 + 0.07 * c for c in range(self.num_classes))
        self.texture_freqs = tuple(float(f) for f in self.texture_freqs)
        if len(self.texture_freqs) != self.num_classes:
            raise DatasetError("one texture frequency per class is required")
        lo, hi = self.size_range
        if lo < 1 or hi < 4 * lo:
            raise DatasetError("size_range must span at least a 4x ratio")
        if self.part_scheme not in ("none", "border-interior"):
            raise DatasetError(f"unknown part scheme {self.part_scheme!r}")
        if self.num_classes > 255:
            raise DatasetError("at most 255 classes fit the label encoding")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - r
    if kind == "disk":
        return yy ** 2 + xx ** 2 <= r ** 2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "triangle":
        return np.abs(xx) <= (yy + r) / 2.0 + 0.5
    if kind == "diamond":
        return np.abs(xx) + np.abs(yy) <= r + 0.5
    if kind == "cross":
        return (np.abs(xx) <= r / 2.5) | (np.abs(yy) <= r / 2.5)
    if kind == "ring":
        d = yy ** 2 + xx ** 2
        return (d <= r ** 2) & (d >= (r / 2.0) ** 2)
    raise ValueError(kind)


def _class_palette(num_classes: int) -> np.ndarray:
    hues = np.arange(num_classes) / max(num_classes, 1)
    # simple HSV -> RGB at full saturation, value 0.9
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6.0) % 6.0
    return 0.9 - 0.9 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _quantize(image: np.ndarray) -> np.ndarray:
    q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / 255.0


def generate_toy_dataset(spec: ToyDatasetSpec, n: int) -> list[SegmentationSample]:
    """Textured geometric shapes, one shape type and texture per class.

    Background is labelled ``IGNORE_INDEX``.  Sample ``i`` always contains
    class ``i mod C`` so every class appears once ``n >= C``.  Images are
    quantised to 8 bits so they survive a PNG round trip unchanged.
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    lo, hi = spec.size_range
    H = W = spec.image_size
    if hi > spec.image_size:
        raise DatasetError(f"shape size {hi} exceeds image size {spec.image_size}")
    rng = np.random.default_rng(spec.seed)
    palette = _class_palette(spec.num_classes)
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    samples = []
    for i in range(n):
        image = np.full((H, W, 3), 0.5) + rng.normal(0.0, 0.05, size=(H, W, 1))
        labels = np.full((H, W), IGNORE_INDEX, dtype=np.uint8)
        owner = np.full((H, W), -1, dtype=np.int64)
        k = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        classes = [i % spec.num_classes] + [int(c) for c in rng.integers(0, spec.num_classes, k - 1)]
        rng.shuffle(classes)
        for obj, c in enumerate(classes):
            # log-uniform sizes so small and large objects are equally common
            size = int(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))))
            y0 = int(rng.integers(0, H - size + 1))
            x0 = int(rng.integers(0, W - size + 1))
            mask = np.zeros((H, W), dtype=bool)
            mask[y0:y0 + size, x0:x0 + size] = _shape_mask(SHAPES[c % len(SHAPES)], size)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * spec.texture_freqs[c] * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            colour = palette[c][None, None, :] * (0.75 + 0.25 * wave[..., None])
            image[mask] = colour[mask]
            labels[mask] = c
            owner[mask] = obj
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
        parts = None
        if spec.part_scheme == "border-interior":
            parts = np.zeros((H, W), dtype=np.uint8)
            for obj in range(len(classes)):
                visible = owner == obj
                if not visible.any():
                    continue
                interior = ndimage.binary_erosion(visible, iterations=2)
                parts[visible & ~interior] = RIM_PART
                parts[interior] = INTERIOR_PART
        samples.append(SegmentationSample(_quantize(np.clip(image, 0.0, 1.0)), labels, parts,
                                          name=f"{i:03d}"))
    return samples


def save_dataset(samples, root, num_classes: int, class_names=None,
                 ignore_index: int = IGNORE_INDEX) -> Path:
    root = Path(root)
    for sub in ("images", "labels", "parts"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = f"{i:03d}.png"
        q = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(q, mode="RGB").save(root / "images" / name)
        Image.fromarray(s.labels.astype(np.uint8), mode="L").save(root / "labels" / name)
        if s.parts is not None:
            Image.fromarray(s.parts.astype(np.uint8), mode="L").save(root / "parts" / name)
    meta = {
        "num_classes": num_classes,
        "ignore_index": ignore_index,
        "class_names": list(class_names or [f"class{c}" for c in range(num_classes)]),
        "count": len(samples),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    return root


class FolderDataset:
    """Lazily loaded PNG dataset, ordered by image filename."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        img_dir = self.root / "images"
        self.files = sorted(p.name for p in img_dir.glob("*.png")) if img_dir.is_dir() else []

    @property
    def num_classes(self) -> int | None:
        return self.meta.get("num_classes")

    def __len__(self):
        return len(self.files)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> SegmentationSample:
        name = self.files[i]
        label_path = self.root / "labels" / name
        if not label_path.exists():
            raise FileNotFoundError(f"missing label file {label_path}")
        image = np.asarray(Image.open(self.root / "images" / name).convert("RGB"))
        labels = np.asarray(Image.open(label_path))
        if labels.ndim != 2:
            raise DatasetError(f"{label_path}: label map must be single-channel")
        if labels.shape != image.shape[:2]:
            raise DatasetError(
                f"{label_path}: label shape {labels.shape} does not match image {image.shape[:2]}"
            )
        parts = None
        part_path = self.root / "parts" / name
        if part_path.exists():
            parts = np.asarray(Image.open(part_path))
            if parts.shape != labels.shape:
                raise DatasetError(f"{part_path}: part shape {parts.shape} does not match labels")
        return SegmentationSample(image.astype(np.float32) / 255.0, labels.astype(np.uint8),
                                  None if parts is None else parts.astype(np.uint8),
                                  name=Path(name).stem)


def load_dataset(path, format: str = "folder") -> FolderDataset:
    if format != "folder":
        raise DatasetError(f"unsupported dataset format {format!r}")
    return FolderDataset(path)


@dataclass
class PartCentroid:
    cls: int
    part: int
    y: float
    x: float


def part_centroids(labels: np.ndarray, parts: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Centroids of the 8-connected components of every (class, part) mask."""
    from .metrics import connected_components

    out = []
    for c in np.unique(labels):
        if c == ignore_index:
            continue
        in_class = labels == c
        for k in np.unique(parts[in_class]):
            if k == 0:
                continue
            _, _, _, cents = connected_components(in_class & (parts == k))
            out += [PartCentroid(int(c), int(k), float(y), float(x)) for y, x in cents]
    return out
