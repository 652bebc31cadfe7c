"""Exact column-similarity search: shrunk Pearson over co-rated rows, the
quadratic all-pairs Top-K construction, and the random-selection control."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .data import SparseRatings


@dataclass
class NeighborTable:
    """Per-column Top-K neighbor indices, one row of K entries per column."""

    N: int
    K: int
    entries: np.ndarray  # (N, K) int32

    def validate(self) -> None:
        if self.entries.shape != (self.N, self.K):
            raise ValueError(f"entries shape {self.entries.shape} != ({self.N}, {self.K})")
        for j in range(self.N):
            row = self.entries[j]
            if len(np.unique(row)) != self.K:
                raise ValueError(f"duplicate neighbor in row {j}")
            if (row == j).any():
                raise ValueError(f"self-neighbor in row {j}")
            if (row < 0).any() or (row >= self.N).any():
                raise ValueError(f"neighbor index out of range in row {j}")

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("j,rank,neighbor\n")
            for j in range(self.N):
                for rank in range(self.K):
                    fh.write(f"{j},{rank},{self.entries[j, rank]}\n")

    @classmethod
    def read_csv(cls, path) -> "NeighborTable":
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        N = int(data[:, 0].max()) + 1
        K = int(data[:, 1].max()) + 1
        entries = np.zeros((N, K), dtype=np.int32)
        entries[data[:, 0], data[:, 1]] = data[:, 2]
        return cls(N=N, K=K, entries=entries)


@dataclass
class SimilarityConfig:
    K: int
    lambda_rho: float = 100.0


@njit(cache=True)
def _pair_stats(rows1, vals1, rows2, vals2):
    """Co-rated-set statistics of two columns via sorted merge.

    Returns (n, s1, s2, s12, q1, q2): count, sums, dot product and squared
    sums over the rows rated in both columns.
    """
    n = 0
    s1 = 0.0
    s2 = 0.0
    s12 = 0.0
    q1 = 0.0
    q2 = 0.0
    a = 0
    b = 0
    while a < len(rows1) and b < len(rows2):
        r1 = rows1[a]
        r2 = rows2[b]
        if r1 == r2:
            v1 = vals1[a]
            v2 = vals2[b]
            n += 1
            s1 += v1
            s2 += v2
            s12 += v1 * v2
            q1 += v1 * v1
            q2 += v2 * v2
            a += 1
            b += 1
        elif r1 < r2:
            a += 1
        else:
            b += 1
    return n, s1, s2, s12, q1, q2


@njit(cache=True)
def _pearson_from_stats(n, s1, s2, s12, q1, q2):
    if n < 2:
        return 0.0
    cov = s12 - s1 * s2 / n
    var1 = q1 - s1 * s1 / n
    var2 = q2 - s2 * s2 / n
    if var1 <= 0.0 or var2 <= 0.0:
        return 0.0
    rho = cov / np.sqrt(var1 * var2)
    if rho > 1.0:
        rho = 1.0
    elif rho < -1.0:
        rho = -1.0
    return rho


def pearson(ratings: SparseRatings, j1: int, j2: int) -> float:
    """Pearson correlation of two columns over their co-rated rows.

    Each column is centered by its mean over the co-rated subset.  Degenerate
    pairs (fewer than 2 co-raters, or zero variance) return 0.
    """
    if j1 == j2:
        raise ValueError("pearson requires two distinct columns")
    r1, v1 = ratings.col_slice(j1)
    r2, v2 = ratings.col_slice(j2)
    return float(_pearson_from_stats(*_pair_stats(r1, v1, r2, v2)))


def shrunk_similarity(ratings: SparseRatings, j1: int, j2: int,
                      lambda_rho: float = 100.0) -> float:
    """Pearson similarity shrunk by co-rating support: n/(n+lambda) * rho."""
    if j1 == j2:
        raise ValueError("shrunk_similarity requires two distinct columns")
    r1, v1 = ratings.col_slice(j1)
    r2, v2 = ratings.col_slice(j2)
    n, s1, s2, s12, q1, q2 = _pair_stats(r1, v1, r2, v2)
    if n == 0:
        return 0.0
    rho = _pearson_from_stats(n, s1, s2, s12, q1, q2)
    return n / (n + lambda_rho) * float(rho)


@njit(cache=True)
def _topk_insert(best_sim, best_idx, count, K, s, j2):
    """Insert (s, j2) into a descending-by-similarity top-K buffer.

    Callers scan j2 in ascending order; strict comparisons keep earlier
    (lower) indices ahead on ties.  Returns the new count.
    """
    if count < K:
        pos = count
        while pos > 0 and best_sim[pos - 1] < s:
            best_sim[pos] = best_sim[pos - 1]
            best_idx[pos] = best_idx[pos - 1]
            pos -= 1
        best_sim[pos] = s
        best_idx[pos] = j2
        return count + 1
    if s > best_sim[K - 1]:
        pos = K - 1
        while pos > 0 and best_sim[pos - 1] < s:
            best_sim[pos] = best_sim[pos - 1]
            best_idx[pos] = best_idx[pos - 1]
            pos -= 1
        best_sim[pos] = s
        best_idx[pos] = j2
    return count


@njit(cache=True, parallel=True)
def _gsm_topk_kernel(col_ptr, col_rows, col_vals, N, K, lambda_rho):
    entries = np.empty((N, K), dtype=np.int32)
    for j1 in prange(N):
        best_sim = np.empty(K, dtype=np.float64)
        best_idx = np.empty(K, dtype=np.int32)
        count = 0
        lo1, hi1 = col_ptr[j1], col_ptr[j1 + 1]
        for j2 in range(N):
            if j2 == j1:
                continue
            lo2, hi2 = col_ptr[j2], col_ptr[j2 + 1]
            n, s1, s2, s12, q1, q2 = _pair_stats(
                col_rows[lo1:hi1], col_vals[lo1:hi1],
                col_rows[lo2:hi2], col_vals[lo2:hi2])
            if n == 0:
                s = 0.0
            else:
                s = n / (n + lambda_rho) * _pearson_from_stats(n, s1, s2, s12, q1, q2)
            count = _topk_insert(best_sim, best_idx, count, K, s, j2)
        entries[j1, :] = best_idx
    return entries


def gsm_topk(ratings: SparseRatings, config: SimilarityConfig) -> NeighborTable:
    """Exact Top-K neighbors of every column by shrunk Pearson similarity.

    All N*(N-1) column pairs are evaluated; cost is quadratic in N.  Ties are
    broken by ascending column index; rows are ordered by descending
    similarity.
    """
    N = ratings.N
    if config.K > N - 1:
        raise ValueError(f"K={config.K} exceeds N-1={N - 1}")
    entries = _gsm_topk_kernel(ratings.col_ptr, ratings.col_rows, ratings.col_vals,
                               N, config.K, config.lambda_rho)
    return NeighborTable(N=N, K=config.K, entries=entries)


def random_topk(N: int, K: int, seed: int) -> NeighborTable:
    """Uniform random neighbor selection without replacement, excluding self."""
    if K > N - 1:
        raise ValueError(f"K={K} exceeds N-1={N - 1}")
    rng = np.random.default_rng(seed)
    entries = np.empty((N, K), dtype=np.int32)
    for j in range(N):
        picks = rng.choice(N - 1, size=K, replace=False)
        picks[picks >= j] += 1
        entries[j] = picks
    return NeighborTable(N=N, K=K, entries=entries)
