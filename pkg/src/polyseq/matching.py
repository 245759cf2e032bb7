"""Soft (Sinkhorn) and exact (Hungarian) assignment over square score matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class SoftAssignment:
    log_entries: T.Tensor
    iterations_used: int
    temperature: float

    @property
    def entries(self) -> T.Tensor:
        return T.exp(self.log_entries)


def sinkhorn_normalize(scores: T.Tensor, iterations: int = 100,
                       temperature: float = 1.0) -> SoftAssignment:
    """Log-domain Sinkhorn over the last two axes of ``scores`` (batched OK).

    Each iteration normalizes rows then columns, so columns sum to one
    exactly on exit and rows converge towards one.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not np.all(np.isfinite(scores.values)):
        raise ValueError("sinkhorn_normalize: non-finite scores")
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise T.ShapeError(f"sinkhorn_normalize: expected square matrices, got {scores.shape}")
    x = T.scale(scores, 1.0 / temperature)
    for _ in range(iterations):
        x = T.log_softmax(x)
        x = T.transpose(T.log_softmax(T.transpose(x)))
    return SoftAssignment(x, iterations, temperature)


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment; returns ``col`` with row ``i`` assigned to ``col[i]``.

    Shortest augmenting path with dual potentials, O(n^3). Ties resolve to the
    lowest column index encountered in scan order, so results are deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise ValueError(f"hungarian: expected a square matrix, got {cost.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col


def hungarian_assign(scores, maximize: bool = True) -> np.ndarray:
    """Binary permutation matrix of the optimal assignment of ``scores``."""
    s = np.asarray(scores.values if isinstance(scores, T.Tensor) else scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("hungarian_assign: non-finite scores")
    col = hungarian(-s if maximize else s)
    perm = np.zeros(s.shape, dtype=np.int64)
    perm[np.arange(len(col)), col] = 1
    return perm
