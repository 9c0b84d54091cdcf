"""Evaluation: mIoU, binarised-activation statistics and interpretability scores.

The interpretability metrics take an ``activation_fn(image) -> (K, H, W)``
callable rather than a model, so they run equally on a trained network or on
a hand-built fixture.  All percentile thresholds use the nearest-rank rule.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.cluster.hierarchy import DisjointSet

from .backbone import downscale_image, downscale_labels, upsample_map

IGNORE_INDEX = 255
CONSISTENCY_VERSION = "centroid-coverage-v1"
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

ActivationFn = Callable[[np.ndarray], np.ndarray]


# -- segmentation quality ----------------------------------------------------------

def confusion(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != ignore_index
    pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError("predicted class id out of range")
    if gt.size and (gt.min() < 0 or gt.max() >= num_classes):
        raise ValueError("ground-truth class id out of range")
    cm = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    return cm.reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from the ground truth."""
    inter = np.diag(cm).astype(float)
    gt_count = cm.sum(1)
    union = gt_count + cm.sum(0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = inter / union
    iou[gt_count == 0] = np.nan
    return iou


def miou(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    iou = iou_from_confusion(confusion(pred, gt, num_classes, ignore_index))
    return float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")


def evaluate_miou(predict: Callable[[np.ndarray], np.ndarray], samples, num_classes: int,
                  ignore_index: int = IGNORE_INDEX):
    """Dataset mIoU from pooled confusion counts. Returns (mean, per-class IoU array)."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    n = 0
    for s in samples:
        cm += confusion(predict(s.image), s.labels, num_classes, ignore_index)
        n += 1
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    iou = iou_from_confusion(cm)
    return float(np.nanmean(iou)), iou


# -- binarisation and components -----------------------------------------------------

def nearest_rank_threshold(values, p: float, mask=None) -> float | None:
    """The p-th percentile (nearest rank) of the masked values, None if nothing is masked."""
    if not 0 < p < 100:
        raise ValueError("percentile must lie in (0, 100)")
    values = np.asarray(values, dtype=float)
    pop = values[mask] if mask is not None else values.ravel()
    if pop.size == 0:
        return None
    rank = max(1, math.ceil(p / 100.0 * pop.size))
    return float(np.partition(pop, rank - 1)[rank - 1])


def binarize_percentile(values, p: float, mask=None) -> np.ndarray:
    """True where the value reaches the masked p-th percentile (all False if the mask is empty)."""
    values = np.asarray(values, dtype=float)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    thr = nearest_rank_threshold(values, p, mask)
    if thr is None:
        return np.zeros(values.shape, dtype=bool)
    out = values >= thr
    return out & mask if mask is not None else out


def connected_components(mask):
    """8-connected labelling -> (count, labels, areas, centroids as (y, x))."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if count == 0:
        return 0, labels, np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=count + 1)[1:]
    ys, xs = np.indices(mask.shape)
    cy = np.bincount(flat, weights=ys.ravel(), minlength=count + 1)[1:] / areas
    cx = np.bincount(flat, weights=xs.ravel(), minlength=count + 1)[1:] / areas
    return count, labels, areas, np.stack([cy, cx], axis=1)


@dataclass
class ComponentStats:
    """(scale, percentile fraction) -> mean component count per map and mean component area."""

    count: dict[tuple[int, float], float] = field(default_factory=dict)
    area: dict[tuple[int, float], float] = field(default_factory=dict)

    def rows(self):
        for key in sorted(self.count):
            yield {"scale": key[0], "percentile": key[1], "mean_count": self.count[key],
                   "mean_area": self.area[key]}


def component_stats_from_maps(maps_by_scale: dict[int, Sequence[np.ndarray]],
                              percentiles=(0.8, 0.9, 0.99)) -> ComponentStats:
    """Binarise every map at each percentile and summarise its 8-connected components.

    Count is averaged over maps; area is pooled over all components found.
    """
    stats = ComponentStats()
    for s, maps in maps_by_scale.items():
        for q in percentiles:
            counts, total_area = [], 0
            for m in maps:
                n, _, areas, _ = connected_components(binarize_percentile(m, 100.0 * q))
                counts.append(n)
                total_area += int(areas.sum())
            stats.count[(s, q)] = float(np.mean(counts)) if counts else 0.0
            n_comp = sum(counts)
            stats.area[(s, q)] = total_area / n_comp if n_comp else 0.0
    return stats


def activation_component_stats(activation_fn: ActivationFn, scale_of, alive, samples,
                               percentiles=(0.8, 0.9, 0.99)) -> ComponentStats:
    """Per-scale component statistics over all alive prototypes and all images."""
    scale_of = np.asarray(scale_of)
    alive = np.asarray(alive, dtype=bool)
    maps_by_scale: dict[int, list] = {int(s): [] for s in np.unique(scale_of)}
    for sample in samples:
        maps = activation_fn(sample.image)
        for rho in np.flatnonzero(alive):
            maps_by_scale[int(scale_of[rho])].append(maps[rho])
    return component_stats_from_maps(maps_by_scale, percentiles)


# -- consistency / stability ----------------------------------------------------------

@dataclass
class PartSample:
    """Semantic labels plus part centroids for one image: ``centroids[c] = [(part, y, x), ...]``."""

    image: np.ndarray
    labels: np.ndarray
    centroids: dict[int, list[tuple[int, float, float]]]


def part_sample(sample, ignore_index: int = IGNORE_INDEX) -> PartSample:
    from .data import part_centroids

    cents: dict[int, list] = {}
    if sample.parts is not None:
        for pc in part_centroids(sample.labels, sample.parts, ignore_index):
            cents.setdefault(pc.cls, []).append((pc.part, pc.y, pc.x))
    return PartSample(sample.image, sample.labels, cents)


def covered_parts(act_map, class_mask, centroids, p: float) -> frozenset[int]:
    """Part ids whose centroid falls inside the binarised (class-restricted) activation."""
    binary = binarize_percentile(act_map, p, class_mask)
    H, W = binary.shape
    hit = set()
    for part, y, x in centroids:
        yi = min(max(int(round(y)), 0), H - 1)
        xi = min(max(int(round(x)), 0), W - 1)
        if binary[yi, xi]:
            hit.add(part)
    return frozenset(hit)


def dominant_part(covers: Sequence[frozenset]) -> int | None:
    counts = Counter(k for cov in covers for k in cov)
    if not counts:
        return None
    best = max(counts.values())
    return min(k for k, v in counts.items() if v == best)


def consistency_from_coverage(covers: Sequence[frozenset]) -> float:
    """Fraction of images whose covered set contains the dominant part (0 if none ever)."""
    dom = dominant_part(covers)
    if dom is None or not covers:
        return 0.0
    return sum(dom in cov for cov in covers) / len(covers)


def _membership(dom, cov) -> bool:
    # without a dominant part the tracked state is "covers nothing"
    return (dom in cov) if dom is not None else (len(cov) == 0)


def stability_from_coverage(clean: Sequence[frozenset], noisy: Sequence[frozenset],
                            dom: int | None) -> list[bool]:
    return [_membership(dom, a) == _membership(dom, b) for a, b in zip(clean, noisy)]


def _coverage_table(activation_fn, class_of, alive, part_samples, thresholds):
    """{(rho, p): [covered set per image containing rho's class]}."""
    class_of = np.asarray(class_of)
    alive = np.asarray(alive, dtype=bool)
    table: dict[tuple[int, float], list] = {}
    eligible = [rho for rho in np.flatnonzero(alive)
                if any(int(class_of[rho]) in ps.centroids for ps in part_samples)]
    for rho in eligible:
        for p in thresholds:
            table[(int(rho), p)] = []
    for ps in part_samples:
        maps = None
        for rho in eligible:
            c = int(class_of[rho])
            if c not in ps.centroids:
                continue
            if maps is None:
                maps = activation_fn(ps.image)
            for p in thresholds:
                table[(int(rho), p)].append(
                    covered_parts(maps[rho], ps.labels == c, ps.centroids[c], p))
    return eligible, table


def consistency_score(activation_fn: ActivationFn, class_of, alive, part_samples,
                      thresholds=(70, 80, 90)) -> float:
    """100 x mean prototype consistency, averaged over thresholds."""
    eligible, table = _coverage_table(activation_fn, class_of, alive, part_samples, thresholds)
    if not eligible:
        return 0.0
    per_thr = [np.mean([consistency_from_coverage(table[(int(r), p)]) for r in eligible])
               for p in thresholds]
    return 100.0 * float(np.mean(per_thr))


def perturb(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive zero-mean Gaussian noise with std ``sigma`` times the image value range."""
    if sigma == 0:
        return image
    span = float(image.max() - image.min()) or 1.0
    return (image + rng.normal(0.0, sigma * span, size=image.shape)).astype(image.dtype)


def stability_score(activation_fn: ActivationFn, class_of, alive, part_samples,
                    sigma: float = 0.05, thresholds=(70, 80, 90), seed: int = 0) -> float:
    """100 x mean over prototypes of the fraction of (image, threshold) cases whose
    dominant-part membership survives input noise."""
    rng = np.random.default_rng(seed)
    noisy_samples = [PartSample(perturb(ps.image, sigma, rng), ps.labels, ps.centroids)
                     for ps in part_samples]
    eligible, clean = _coverage_table(activation_fn, class_of, alive, part_samples, thresholds)
    if not eligible:
        return 100.0
    _, noisy = _coverage_table(activation_fn, class_of, alive, noisy_samples, thresholds)
    scores = []
    for rho in eligible:
        same = []
        for p in thresholds:
            key = (int(rho), p)
            same += stability_from_coverage(clean[key], noisy[key], dominant_part(clean[key]))
        scores.append(np.mean(same) if same else 1.0)
    return 100.0 * float(np.mean(scores))


# -- sparsity / overlap -------------------------------------------------------------------

def sparsity_score(head_weight, tau: float = 0.005) -> tuple[int, float]:
    """(entries with |w| > tau, that count divided by the number of classes)."""
    w = np.abs(np.asarray(head_weight, dtype=float))
    total = int((w > tau).sum())
    return total, total / w.shape[0]


def mask_iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def group_overlap_miou(group_fn: ActivationFn, group_class, samples, percentile: float = 95) -> float:
    """Mean IoU (x100) between binarised activations of same-class groups."""
    group_class = np.asarray(group_class)
    classes = [c for c in np.unique(group_class) if (group_class == c).sum() >= 2]
    if not classes:
        return float("nan")
    pair_ious: dict[tuple[int, int], list] = {}
    for s in samples:
        maps = group_fn(s.image)
        binary = [binarize_percentile(m, percentile) for m in maps]
        for c in classes:
            for i, j in combinations(np.flatnonzero(group_class == c), 2):
                pair_ious.setdefault((int(i), int(j)), []).append(mask_iou(binary[i], binary[j]))
    per_class = []
    for c in classes:
        pairs = [np.mean(v) for (i, _), v in pair_ious.items() if group_class[i] == c]
        per_class.append(np.mean(pairs))
    return 100.0 * float(np.mean(per_class))


# -- quasi-equivariance -------------------------------------------------------------------

@dataclass
class EquivarianceReport:
    pairs: list[tuple[int, int, float]]  # (prototype i at coarser input scale, prototype j, mIoU)
    groups: list[set[int]]
    class_flags: dict[int, bool]
    scores: dict[tuple[int, int], float] = field(default_factory=dict)

    def is_pair(self, a: int, b: int) -> bool:
        return any({i, j} == {a, b} for i, j, _ in self.pairs)


def pair_miou(maps_a, maps_b, masks, p_th: float) -> float:
    """Mean over images of IoU between masked p_th-binarised maps (maps already aligned)."""
    ious = [mask_iou(binarize_percentile(a, 100.0 * p_th, m), binarize_percentile(b, 100.0 * p_th, m))
            for a, b, m in zip(maps_a, maps_b, masks)]
    return float(np.mean(ious)) if ious else 0.0


def merge_pairs(pairs) -> list[set[int]]:
    ds = DisjointSet()
    for i, j, *_ in pairs:
        ds.add(i)
        ds.add(j)
        ds.merge(i, j)
    return sorted((set(g) for g in ds.subsets()), key=min)


def equivariance_analysis(activation_fn: ActivationFn, class_of, scale_of, alive, samples,
                          ratios, reduction: int, p_th: float = 0.6,
                          iou_th: float = 0.5) -> EquivarianceReport:
    """Find cross-scale prototype pairs whose activations match after input rescaling.

    ``activation_fn(image)`` returns (P, h, w) activations at feature
    resolution.  For scales s < s' the scale-s maps come from the image
    downscaled by ``ratios[s']`` and the scale-s' maps from the image
    downscaled by ``ratios[s]``.  The smaller map is bilinearly upsampled onto
    the larger grid and both are then binarised on class positions.
    """
    class_of = np.asarray(class_of)
    scale_of = np.asarray(scale_of)
    alive = np.asarray(alive, dtype=bool)
    S = len(ratios)
    acc: dict[tuple[int, int], list] = {}
    for sample in samples:
        present = set(np.unique(sample.labels).tolist()) - {IGNORE_INDEX}
        views = {}
        for t in sorted(set(ratios)):
            img = downscale_image(sample.image, t)
            lab = downscale_labels(sample.labels, img.shape[:2])
            views[t] = (activation_fn(img), lab[::reduction, ::reduction])
        for s, s2 in combinations(range(S), 2):
            maps_small, _ = views[ratios[s2]]
            maps_large, grid = views[ratios[s]]
            h, w = maps_large.shape[1:]
            grid = grid[:h, :w]
            for c in present:
                cmask = grid == c
                if not cmask.any():
                    continue
                idx_s = np.flatnonzero((scale_of == s) & (class_of == c) & alive)
                idx_s2 = np.flatnonzero((scale_of == s2) & (class_of == c) & alive)
                if not len(idx_s) or not len(idx_s2):
                    continue
                up = upsample_map(maps_small[idx_s], (h, w))
                bin_s = [binarize_percentile(m, 100.0 * p_th, cmask) for m in up]
                bin_s2 = [binarize_percentile(maps_large[j], 100.0 * p_th, cmask) for j in idx_s2]
                for a, i in enumerate(idx_s):
                    for b, j in enumerate(idx_s2):
                        acc.setdefault((int(i), int(j)), []).append(mask_iou(bin_s[a], bin_s2[b]))
    scores = {k: float(np.mean(v)) for k, v in acc.items()}
    pairs = sorted((i, j, m) for (i, j), m in scores.items() if m >= iou_th)
    groups = merge_pairs(pairs)
    flags = {int(c): False for c in np.unique(class_of)}
    for g in groups:
        flags[int(class_of[next(iter(g))])] = True
    return EquivarianceReport(pairs, groups, flags, scores)
