"""Bipartite matching between prediction slots and (padded) ground-truth slots.

The matcher maximizes the summed PQ-style similarity

    sim(i, j) = [y_hat_i * y_j + (1 - y_hat_i) * (1 - y_j)] * Dice(m_hat_i, m_j)

over all permutations.  Among optimal permutations the lexicographically
smallest one is returned, which makes results reproducible when the
similarity matrix has ties (for instance between padding columns).
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Sequence

import numpy as np

from hierkit import geometry

__all__ = [
    "PredictionSlot",
    "TargetSlot",
    "Assignment",
    "similarity",
    "similarity_matrix",
    "pad_targets",
    "linear_assignment",
    "match",
    "match_matrix",
    "brute_force_match",
]

# Two totals closer than this are treated as a tie.
TIE_TOL = 1e-12
BRUTE_FORCE_MAX_N = 8


@dataclasses.dataclass(frozen=True, eq=False)
class PredictionSlot:
    soft_mask: np.ndarray
    textness: float

    def __post_init__(self):
        if not 0.0 <= self.textness <= 1.0:
            raise ValueError(f"textness {self.textness} outside [0, 1]")


@dataclasses.dataclass(frozen=True, eq=False)
class TargetSlot:
    mask: np.ndarray
    is_text: int
    cluster_id: int = -1

    def __post_init__(self):
        if self.is_text not in (0, 1):
            raise ValueError(f"is_text must be 0 or 1, got {self.is_text}")

    @classmethod
    def padding(cls, height: int, width: int) -> "TargetSlot":
        return cls(np.zeros((height, width), dtype=bool), 0, -1)


@dataclasses.dataclass(frozen=True)
class Assignment:
    """``sigma[i]`` is the target index matched to prediction ``i`` (0-based)."""

    sigma: tuple[int, ...]
    total_similarity: float

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise ValueError(f"sigma {self.sigma} is not a permutation")


def similarity(p: PredictionSlot, t: TargetSlot) -> float:
    cls_term = p.textness * t.is_text + (1.0 - p.textness) * (1 - t.is_text)
    return cls_term * geometry.dice(p.soft_mask, t.mask)


def similarity_matrix(predictions: Sequence[PredictionSlot],
                      targets: Sequence[TargetSlot]) -> np.ndarray:
    """Vectorized ``sim(i, j)`` for every prediction/target pair."""
    if not predictions or not targets:
        return np.zeros((len(predictions), len(targets)))
    pm = np.stack([np.asarray(p.soft_mask, dtype=float) for p in predictions])
    tm = np.stack([np.asarray(t.mask, dtype=float) for t in targets])
    if pm.shape[1:] != tm.shape[1:]:
        raise ValueError(f"mask dimension mismatch: {pm.shape[1:]} vs {tm.shape[1:]}")
    if pm.size and (pm.min() < 0.0 or pm.max() > 1.0):
        raise ValueError("soft mask entries must lie in [0, 1]")
    pm = pm.reshape(len(predictions), -1)
    tm = tm.reshape(len(targets), -1)
    inter = pm @ tm.T
    denom = pm.sum(axis=1)[:, None] + tm.sum(axis=1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(denom > 0, 2.0 * inter / np.where(denom > 0, denom, 1.0), 0.0)
    y_hat = np.array([p.textness for p in predictions], dtype=float)[:, None]
    y = np.array([t.is_text for t in targets], dtype=float)[None, :]
    return (y_hat * y + (1.0 - y_hat) * (1.0 - y)) * dice


def pad_targets(real_targets: Sequence[TargetSlot], n: int) -> list[TargetSlot]:
    """Append padding slots (``is_text=0``, empty mask) up to length ``n``."""
    k = len(real_targets)
    if k > n:
        raise ValueError(
            f"{k} ground-truth entities exceed {n} prediction slots; raise the number of queries"
        )
    if k == n:
        return list(real_targets)
    if k == 0:
        raise ValueError("cannot infer mask size for padding without any real target")
    h, w = np.shape(real_targets[0].mask)
    return list(real_targets) + [TargetSlot.padding(h, w) for _ in range(n - k)]


# ---------------------------------------------------------------------------
# Hungarian algorithm
# ---------------------------------------------------------------------------

def _hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost perfect matching on a square matrix.

    Shortest augmenting path formulation with row/column potentials; runs in
    O(n^3).  Returns ``(row_to_col, u, v)`` where ``cost[i, j] - u[i] - v[j]``
    is non-negative everywhere and zero on matched edges.
    """
    n = cost.shape[0]
    inf = math.inf
    # 1-based internally; index 0 is the virtual source column.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[col_owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[col_owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_refine(tight: np.ndarray, row_to_col: np.ndarray) -> np.ndarray:
    """Turn a perfect matching inside ``tight`` into the lexicographically smallest one.

    ``tight[i, j]`` marks edges with zero reduced cost.  Every perfect
    matching made only of tight edges is optimal, so rows are fixed in order
    to the smallest column reachable through an alternating cycle among the
    rows that are not fixed yet.
    """
    n = tight.shape[0]
    row_to_col = row_to_col.copy()
    col_to_row = np.empty(n, dtype=np.int64)
    col_to_row[row_to_col] = np.arange(n)
    for i in range(n):
        target = row_to_col[i]
        for j in np.flatnonzero(tight[i, :target]):
            if col_to_row[j] < i:
                continue
            # Search an alternating path from the row owning j to column `target`.
            start = col_to_row[j]
            parent = {start: -1}
            queue = [start]
            found = None
            while queue and found is None:
                r = queue.pop(0)
                for c in np.flatnonzero(tight[r]):
                    if c == j or col_to_row[c] < i:
                        continue
                    if c == target:
                        found = (r, c)
                        break
                    nr = col_to_row[c]
                    if nr not in parent:
                        parent[nr] = r
                        queue.append(nr)
            if found is None:
                continue
            r, c = found
            # Unwind: every row on the path takes the column that led past it.
            while r != -1:
                prev_col = row_to_col[r]
                row_to_col[r] = c
                col_to_row[c] = r
                c = prev_col
                r = parent[r]
            row_to_col[i] = j
            col_to_row[j] = i
            break
    return row_to_col


def linear_assignment(weights: np.ndarray, maximize: bool = True) -> np.ndarray:
    """Optimal row-to-column assignment of a square matrix, lexicographic on ties."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    n = w.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cost = -w if maximize else w
    cost = cost - cost.min()
    row_to_col, u, v = _hungarian(cost)
    scale = max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= TIE_TOL * scale
    return _lexicographic_refine(tight, row_to_col)


def match_matrix(sim: np.ndarray) -> Assignment:
    """Maximize total similarity via Hungarian minimization of ``1 - sim``."""
    sim = np.asarray(sim, dtype=float)
    cost = np.clip(1.0 - sim, 0.0, 1.0)
    sigma = linear_assignment(cost, maximize=False)
    total = float(sim[np.arange(len(sigma)), sigma].sum())
    return Assignment(tuple(int(s) for s in sigma), total)


def match(predictions: Sequence[PredictionSlot], targets: Sequence[TargetSlot]) -> Assignment:
    if len(predictions) != len(targets):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(targets)} targets; pad targets first"
        )
    return match_matrix(similarity_matrix(predictions, targets))


def brute_force_match(sim) -> Assignment:
    """Exhaustive search over all permutations; test oracle for :func:`match`.

    Accepts a similarity matrix or a ``(predictions, targets)`` pair.
    """
    if isinstance(sim, tuple):
        preds, targets = sim
        if len(preds) != len(targets):
            raise ValueError("length mismatch")
        sim = similarity_matrix(preds, targets)
    sim = np.asarray(sim, dtype=float)
    n = sim.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}, got {n}")
    rows = np.arange(n)
    best_sigma, best_total = None, -math.inf
    # permutations() yields in lexicographic order, so keep the first maximum.
    for perm in itertools.permutations(range(n)):
        total = float(sim[rows, list(perm)].sum())
        if total > best_total + TIE_TOL:
            best_sigma, best_total = perm, total
    return Assignment(tuple(best_sigma), best_total)
