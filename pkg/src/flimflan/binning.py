"""Log-scale temporal bin merging (T original bins -> M merged bins).

Merged bin ``x`` covers original bins ``[s(x), s(x+1))`` with
``s(x) = floor((r**x - 1) / (r - 1))`` and ``r`` chosen so that the geometric
series of ``M`` terms sums to ``T``. Early bins stay at single-bin resolution,
late bins grow geometrically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decay import Histogram


def _geometric_residual(d: float, T: int, M: int) -> float:
    # series sum written in d = r - 1 to avoid cancellation as r -> 1
    e = M * math.log1p(d)
    if e > 700.0:
        return math.inf  # far above any representable T
    return math.expm1(e) / d - T


def solve_ratio(T: int, M: int, tol: float = 1e-10, max_iter: int = 400) -> float:
    """Unique ``r > 1`` with ``(r**M - 1)/(r - 1) = T``, found by bisection."""
    if M <= 1:
        raise ValueError("merged bin count must exceed 1")
    if M >= T:
        raise ValueError(f"no ratio > 1 exists for M={M} >= T={T}")
    lo, hi = 1e-12, 1.0
    # r in (1, 2] covers every M > log2(T + 1); widen for very coarse merges
    while _geometric_residual(hi, T, M) < 0:
        lo, hi = hi, 2.0 * hi
    if abs(_geometric_residual(hi, T, M)) <= tol:
        return 1.0 + hi
    mid = hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = _geometric_residual(mid, T, M)
        if abs(f) <= tol:
            return 1.0 + mid
        if f > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    if abs(_geometric_residual(mid, T, M)) > tol:
        raise ArithmeticError(f"bisection stalled: residual {_geometric_residual(mid, T, M):.3e}")
    return 1.0 + mid


def bin_edges(T: int, M: int, r: float) -> np.ndarray:
    d = r - 1.0
    # tiny slack so exact integers (e.g. x = 1 -> 1) survive rounding in expm1/log1p
    edges = np.array(
        [math.floor(math.expm1(x * math.log1p(d)) / d + 1e-9) for x in range(M + 1)], dtype=np.int64
    )
    edges[M] = T
    if edges[0] != 0 or np.any(np.diff(edges) < 1):
        raise ValueError("ratio does not produce a valid partition")
    return edges


@dataclass(frozen=True)
class LogBinSpec:
    original_bins: int = 256
    merged_bins: int = 80

    @property
    def ratio(self) -> float:
        return solve_ratio(self.original_bins, self.merged_bins)

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.original_bins, self.merged_bins, self.ratio)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def compress_counts(counts: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Sum counts over each merged interval; works row-wise on 2-D input."""
    counts = np.asarray(counts)
    if counts.shape[-1] != edges[-1]:
        raise ValueError(f"expected {edges[-1]} bins, got {counts.shape[-1]}")
    return np.add.reduceat(counts, edges[:-1], axis=-1)


def compress_histogram(h: Histogram, spec: LogBinSpec) -> Histogram:
    if h.bin_edges is not None:
        raise ValueError("histogram is already log-compressed")
    edges = spec.edges
    if len(h) != spec.original_bins:
        raise ValueError(f"histogram has {len(h)} bins, spec expects {spec.original_bins}")
    return Histogram(compress_counts(h.counts, edges), h.bin_width, edges)
