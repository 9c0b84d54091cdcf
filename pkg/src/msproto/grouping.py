"""Sparse per-class grouping of prototypes.

Each class owns an ``N_c x |P_c|`` matrix whose rows live on the probability
simplex.  A group's activation is the weighted geometric mean of its
prototypes' activations, evaluated in the log domain with a floor ``delta``.
"""
from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn

from .backbone import upsample_map
from .prototypes import DEFAULT_EPS, PrototypeBank, activation_map, assignment_head

DEFAULT_DELTA = 1e-6
DEFAULT_GROUPS = 3


def project_row_to_simplex(v, mask=None):
    """Euclidean projection of each row (last axis) onto the probability simplex.

    Sort-based algorithm.  Entries where ``mask`` is False are pinned to zero
    and the row is projected onto the simplex over the remaining entries.
    Accepts numpy arrays or torch tensors.
    """
    is_np = not isinstance(v, torch.Tensor)
    t = torch.as_tensor(np.asarray(v, dtype=float)) if is_np else v
    if mask is None:
        mask = torch.ones_like(t, dtype=torch.bool)
    else:
        mask = torch.as_tensor(mask, dtype=torch.bool).expand_as(t)
    neg_inf = torch.full_like(t, float("-inf"))
    u, _ = torch.sort(torch.where(mask, t, neg_inf), dim=-1, descending=True)
    finite = torch.isfinite(u)
    css = torch.cumsum(torch.where(finite, u, torch.zeros_like(u)), dim=-1) - 1.0
    k = torch.arange(1, t.shape[-1] + 1, dtype=t.dtype)
    cond = finite & (u - css / k > 0)
    rho = cond.sum(-1, keepdim=True).clamp_min(1)
    theta = css.gather(-1, rho - 1) / rho.to(t.dtype)
    out = torch.where(mask, torch.clamp(t - theta, min=0.0), torch.zeros_like(t))
    return out.numpy() if is_np else out


def group_activation(proto_acts, row, delta: float = DEFAULT_DELTA):
    """prod_k g_k ** w_k computed as exp(sum_k w_k log max(g_k, delta))."""
    if isinstance(proto_acts, torch.Tensor) or isinstance(row, torch.Tensor):
        g = torch.as_tensor(proto_acts)
        w = torch.as_tensor(row, dtype=g.dtype)
        return torch.exp((w * torch.log(torch.clamp(g, min=delta))).sum(-1))
    g = np.asarray(proto_acts, dtype=float)
    w = np.asarray(row, dtype=float)
    return np.exp((w * np.log(np.maximum(g, delta))).sum(-1))


class GroupModel(nn.Module):
    """Group matrices ``weights`` (C, N_c, S*M) and group head (C, C*N_c)."""

    def __init__(self, bank: PrototypeBank, groups_per_class: int = DEFAULT_GROUPS,
                 delta: float = DEFAULT_DELTA, generator: torch.Generator | None = None):
        super().__init__()
        C = bank.num_classes
        K = bank.num_scales * bank.per_scale
        dtype = bank.vectors.dtype
        self.num_classes = C
        self.groups_per_class = groups_per_class
        self.delta = delta
        index = torch.stack([bank.class_indices(c) for c in range(C)])
        self.register_buffer("proto_index", index)
        self.register_buffer("column_alive", bank.alive[index].clone())
        self.register_buffer("group_class", torch.arange(C * groups_per_class) // groups_per_class)
        raw = torch.rand(C, groups_per_class, K, generator=generator, dtype=dtype) + 0.5
        raw = raw * self.column_alive[:, None, :]
        self.weights = nn.Parameter(raw / raw.sum(-1, keepdim=True))
        self.head = nn.Parameter(assignment_head(self.group_class, C, dtype))

    @property
    def num_groups(self) -> int:
        return self.num_classes * self.groups_per_class

    def project_(self) -> None:
        with torch.no_grad():
            self.weights.copy_(project_row_to_simplex(self.weights, self.column_alive[:, None, :]))

    def rows(self) -> torch.Tensor:
        """All group rows, (N, S*M), in global group order."""
        return self.weights.reshape(self.num_groups, -1)


def group_activation_map(acts: torch.Tensor, gm: GroupModel) -> torch.Tensor:
    """(B, P, H, W) prototype activations -> (B, N, H, W) group activations."""
    B, _, H, W = acts.shape
    C, K = gm.proto_index.shape
    a = acts[:, gm.proto_index.reshape(-1)].reshape(B, C, K, H, W)
    log_a = torch.log(torch.clamp(a, min=gm.delta))
    w = gm.weights.to(acts.dtype)
    out = torch.exp(torch.einsum("cnk,bckhw->bcnhw", w, log_a))
    return out.reshape(B, C * gm.groups_per_class, H, W)


def threshold_groups(gm: GroupModel, alpha: float) -> GroupModel:
    """Copy of ``gm`` with weights below ``alpha`` set to zero (no renormalisation).

    A row that would lose every entry keeps its largest one (lowest index on ties).
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    out = copy.deepcopy(gm)
    with torch.no_grad():
        w = out.weights
        keep = w >= alpha
        empty = ~keep.any(-1)
        if empty.any():
            top = w.argmax(-1)  # first max wins
            keep |= (torch.nn.functional.one_hot(top, w.shape[-1]).bool() & empty[..., None])
        w.mul_(keep.to(w.dtype))
    return out


def count_active_prototypes(gm: GroupModel, alpha: float = 0.0) -> tuple[int, float]:
    """(distinct prototypes used by any group, mean number of prototypes per group).

    A weight counts when it is nonzero and at least ``alpha``.
    """
    w = gm.weights.detach()
    active = (w > 0) & (w >= alpha)
    used = active.any(dim=1)  # (C, K)
    return int(used.sum()), float(active.sum(-1).double().mean())


def group_scores(acts: torch.Tensor, gm: GroupModel) -> torch.Tensor:
    g = group_activation_map(acts, gm)
    return torch.einsum("cn,bnhw->bchw", gm.head.to(g.dtype), g)


def group_segment(feats, bank: PrototypeBank, gm: GroupModel, target_shape,
                  eps: float = DEFAULT_EPS, stride: float | None = None) -> torch.Tensor:
    scores = group_scores(activation_map(feats, bank, eps), gm)
    mode = "stride" if stride else "align_corners"
    return upsample_map(scores, target_shape, mode=mode, stride=stride)


def group_edges(gm: GroupModel):
    """Nonzero (class, group, prototype, weight) edges of every group graph."""
    w = gm.weights.detach()
    rows = []
    for c in range(gm.num_classes):
        for n in range(gm.groups_per_class):
            for k in torch.nonzero(w[c, n] > 0).flatten().tolist():
                rows.append((c, c * gm.groups_per_class + n, int(gm.proto_index[c, k]),
                             float(w[c, n, k])))
    return rows
