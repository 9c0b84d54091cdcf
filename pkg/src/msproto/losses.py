"""Training objectives for both stages."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .prototypes import PrototypeBank, squared_distances

IGNORE_INDEX = 255
KL_SMOOTHING = 1e-8


@dataclass
class LossWeights:
    lambda_j: float = 0.25
    lambda_ent: float = 0.05
    lambda_l1: float = 1e-3

    def __post_init__(self):
        if min(self.lambda_j, self.lambda_ent, self.lambda_l1) < 0:
            raise ValueError("loss weights must be non-negative")


def cross_entropy_map(scores: torch.Tensor, labels: torch.Tensor,
                      ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean per-position cross-entropy of (B, C, H, W) scores against (B, H, W) labels."""
    labels = labels.long()
    if not (labels != ignore_index).any():
        warnings.warn("every position is ignored; cross-entropy defined as 0", RuntimeWarning)
        return scores.sum() * 0.0
    return F.cross_entropy(scores, labels, ignore_index=ignore_index)


def distance_softmax(feat_s: torch.Tensor, prototype: torch.Tensor, class_mask,
                     negate: bool = False) -> torch.Tensor | None:
    """Softmax over squared distances at the masked positions (row-major order).

    Returns None when fewer than two positions are selected.
    """
    mask = torch.as_tensor(class_mask, dtype=torch.bool).reshape(-1)
    if int(mask.sum()) < 2:
        return None
    d = feat_s.shape[0]
    z = feat_s.reshape(d, -1)[:, mask]
    dist = ((z - prototype[:, None]) ** 2).sum(0)
    return torch.softmax(-dist if negate else dist, dim=0)


def _smooth(p, n, smoothing):
    return (1.0 - smoothing) * p + smoothing / n


def jeffreys_divergence(u, v, smoothing: float = KL_SMOOTHING) -> torch.Tensor:
    """KL(u||v) + KL(v||u) in nats, after mixing both with the uniform distribution."""
    u, v = torch.as_tensor(u), torch.as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch {tuple(u.shape)} vs {tuple(v.shape)}")
    n = u.shape[-1]
    u, v = _smooth(u, n, smoothing), _smooth(v, n, smoothing)
    return ((u - v) * (torch.log(u) - torch.log(v))).sum(-1)


def jeffreys_similarity(dists, smoothing: float = KL_SMOOTHING) -> torch.Tensor:
    """Mean over unordered pairs of exp(-D_J)."""
    if len(dists) < 2:
        raise ValueError("Jeffreys similarity needs at least two distributions")
    terms = [torch.exp(-jeffreys_divergence(a, b, smoothing))
             for a, b in itertools.combinations(dists, 2)]
    return torch.stack(terms).mean()


def diversity_loss(feats: torch.Tensor, bank: PrototypeBank, grid_labels: torch.Tensor,
                   negate: bool = False, smoothing: float = KL_SMOOTHING) -> torch.Tensor:
    """Per-scale Jeffreys diversity loss averaged over the batch.

    ``feats`` is (B, S, d, H, W) and ``grid_labels`` (B, H, W) at feature
    resolution.  Every (class, scale) cell is divided by C*S; cells with fewer
    than two alive prototypes or two labelled positions add nothing.
    """
    B = feats.shape[0]
    C, S, M = bank.num_classes, bank.num_scales, bank.per_scale
    dist = squared_distances(feats, bank).reshape(B, len(bank), -1)  # (B, P, HW)
    labels = grid_labels.reshape(B, 1, -1).to(bank.class_of.device)
    valid = labels == bank.class_of[None, :, None]  # (B, P, HW)
    count = valid.sum(-1)  # (B, P)
    usable = count >= 2
    # rows without two positions get a dummy full mask so nothing below is nan
    mask = valid | ~usable[..., None]
    logits = (-dist if negate else dist).masked_fill(~mask, float("-inf"))
    p = torch.softmax(logits, dim=-1)
    n = mask.sum(-1, keepdim=True).to(p.dtype)
    p = torch.where(mask, _smooth(p, n, smoothing), torch.zeros_like(p))
    log_p = torch.log(torch.where(mask, p, torch.ones_like(p)))

    p = p.reshape(B, C, S, M, -1)
    log_p = log_p.reshape(B, C, S, M, -1)
    alive = bank.alive.reshape(C, S, M)
    cell_ok = usable.reshape(B, C, S, M)[..., 0]  # same class mask within a cell
    total = feats.new_zeros(B)
    pairs = list(itertools.combinations(range(M), 2))
    if not pairs:
        return total.mean()
    i, j = zip(*pairs)
    i, j = list(i), list(j)
    dj = ((p[..., i, :] - p[..., j, :]) * (log_p[..., i, :] - log_p[..., j, :])).sum(-1)
    pair_ok = (alive[..., i] & alive[..., j])[None] & cell_ok[..., None]  # (B, C, S, pairs)
    sim = torch.where(pair_ok, torch.exp(-dj), torch.zeros_like(dj)).sum(-1)
    n_pairs = pair_ok.sum(-1)
    cell = torch.where(n_pairs > 0, sim / n_pairs.clamp_min(1), torch.zeros_like(sim))
    total = cell.sum((1, 2)) / (C * S)
    return total.mean()


def entropy_loss(weights: torch.Tensor) -> torch.Tensor:
    """Mean row entropy of (C, N_c, K) group matrices, with 0 log 0 = 0."""
    pos = weights > 0
    safe = torch.where(pos, weights, torch.ones_like(weights))
    h = -torch.where(pos, weights * torch.log(safe), torch.zeros_like(weights))
    C, N = weights.shape[:2]
    return h.sum() / (C * N)


def offclass_l1(head: torch.Tensor, owner: torch.Tensor) -> torch.Tensor:
    """Sum of |w[c, n]| over columns ``n`` not owned by class ``c``."""
    rows = torch.arange(head.shape[0])[:, None]
    off = rows != owner[None, :]
    return (head.abs() * off.to(head.dtype)).sum()


def stage1_loss(ce, l_j, lambda_j: float, l1=0.0, lambda_l1: float = 0.0):
    return ce + lambda_j * l_j + lambda_l1 * l1


def stage2_loss(ce, l_ent, l1, lambda_ent: float, lambda_l1: float):
    return ce + lambda_ent * l_ent + lambda_l1 * l1
