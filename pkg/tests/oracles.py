"""Slow, obviously-correct reference implementations used as test oracles."""
from __future__ import annotations

import itertools
import math
from collections import deque
from functools import lru_cache

import numpy as np


def flood_fill_labels(mask: np.ndarray):
    """BFS labelling with 8-neighbourhoods, components numbered in raster order of first pixel."""
    H, W = mask.shape
    labels = np.zeros((H, W), dtype=np.int64)
    n = 0
    for y in range(H):
        for x in range(W):
            if mask[y, x] and labels[y, x] == 0:
                n += 1
                labels[y, x] = n
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and labels[ny, nx] == 0:
                                labels[ny, nx] = n
                                q.append((ny, nx))
    return n, labels


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two label images describe the same partition (label ids may differ)."""
    if ((a == 0) != (b == 0)).any():
        return False
    pairs = set(zip(a[a > 0].tolist(), b[b > 0].tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


@lru_cache(maxsize=None)
def simplex_grid(n: int, steps: int) -> np.ndarray:
    """Integer compositions of ``steps`` into ``n`` parts (rows of a simplex grid, unscaled)."""
    if n == 1:
        return np.array([[steps]], dtype=np.int16)
    blocks = []
    for first in range(steps + 1):
        rest = simplex_grid(n - 1, steps - first)
        blocks.append(np.hstack([np.full((len(rest), 1), first, dtype=np.int16), rest]))
    return np.vstack(blocks)


def grid_simplex_projection(v: np.ndarray, steps: int = 100) -> np.ndarray:
    """Grid point of the simplex closest to v (exhaustive scan in chunks)."""
    grid = simplex_grid(len(v), steps)
    best, best_d = None, np.inf
    for start in range(0, len(grid), 500_000):
        pts = grid[start:start + 500_000].astype(float) / steps
        d = ((pts - v) ** 2).sum(1)
        i = int(np.argmin(d))
        if d[i] < best_d:
            best, best_d = pts[i], d[i]
    return best


def activation_loop(feats: np.ndarray, protos: np.ndarray, scale_of, eps: float) -> np.ndarray:
    """(S, d, H, W) features and (P, d) prototypes -> (P, H, W) by explicit loops."""
    _, _, H, W = feats.shape
    out = np.zeros((len(protos), H, W))
    for k, p in enumerate(protos):
        for y in range(H):
            for x in range(W):
                z = feats[scale_of[k], :, y, x]
                dist = sum((z[i] - p[i]) ** 2 for i in range(len(p)))
                out[k, y, x] = math.log((dist + 1.0) / (dist + eps))
    return out


def group_map_loop(acts: np.ndarray, weights: np.ndarray, proto_index: np.ndarray, delta: float):
    """(P, H, W) prototype activations, (C, N, K) weights -> (C*N, H, W) by loops."""
    C, N, K = weights.shape
    _, H, W = acts.shape
    out = np.zeros((C * N, H, W))
    for c in range(C):
        for n in range(N):
            for y in range(H):
                for x in range(W):
                    prod = 1.0
                    for k in range(K):
                        g = max(acts[proto_index[c, k], y, x], delta)
                        prod *= g ** weights[c, n, k]
                    out[c * N + n, y, x] = prod
    return out


def project_exhaustive(feats_list, labels_list, protos, class_of, scale_of, class_restricted=True):
    """Nearest training vector for each prototype by full scan; returns (image, row, col) per prototype."""
    out = []
    for k, p in enumerate(protos):
        best, where = np.inf, None
        for i, (f, lab) in enumerate(zip(feats_list, labels_list)):
            _, _, H, W = f.shape
            for y in range(H):
                for x in range(W):
                    if class_restricted and lab[y, x] != class_of[k]:
                        continue
                    dist = float(((f[scale_of[k], :, y, x] - p) ** 2).sum())
                    if dist < best:
                        best, where = dist, (i, y, x)
        out.append(where)
    return out


# -- numpy losses for finite differences -------------------------------------------------

def np_activation(z, p, eps):
    dist = ((z - p) ** 2).sum()
    return np.log(dist + 1.0) - np.log(dist + eps)


def np_group(g, w, delta):
    return float(np.prod(np.maximum(g, delta) ** w))


def np_entropy(weights):
    C, N, _ = weights.shape
    total = 0.0
    for c in range(C):
        for n in range(N):
            for v in weights[c, n]:
                if v > 0:
                    total -= v * math.log(v)
    return total / (C * N)


def np_diversity(feats, protos, labels, C, S, M, alive=None, smoothing=1e-8, negate=False):
    """Loop version of the per-scale Jeffreys diversity loss."""
    B = feats.shape[0]
    alive = np.ones(C * S * M, dtype=bool) if alive is None else alive
    total = 0.0
    for b in range(B):
        acc = 0.0
        for c in range(C):
            pos = np.argwhere(labels[b] == c)
            if len(pos) < 2:
                continue
            for s in range(S):
                dists = []
                for m in range(M):
                    k = (c * S + s) * M + m
                    if not alive[k]:
                        continue
                    d = np.array([((feats[b, s, :, y, x] - protos[k]) ** 2).sum() for y, x in pos])
                    d = -d if negate else d
                    e = np.exp(d - d.max())
                    q = e / e.sum()
                    dists.append((1 - smoothing) * q + smoothing / len(q))
                if len(dists) < 2:
                    continue
                sims = [np.exp(-((u - v) * (np.log(u) - np.log(v))).sum())
                        for u, v in itertools.combinations(dists, 2)]
                acc += np.mean(sims)
        total += acc / (C * S)
    return total / B
