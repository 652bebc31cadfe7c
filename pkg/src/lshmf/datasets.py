"""Seeded synthetic datasets for tests, benchmarks and desk-scale runs.

``synthetic_movielens_100k`` is a statistical stand-in for the MovieLens-100K
benchmark: same shape (943 x 1682, 100,000 ratings on a 1..5 integer scale),
skewed user activity and item popularity, user/item bias structure, a latent
factor component and genre-style item clusters that give the columns genuine
neighborhood structure.  When the real dataset is available its file can be
ingested through the normal CLI path instead.
"""

from __future__ import annotations

import numpy as np

from .data import SparseRatings


def _sample_counts(rng, M, total, minimum, cap):
    """Skewed per-row counts that sum to ``total``."""
    w = rng.lognormal(0.0, 1.0, size=M)
    extra = total - minimum * M
    counts = minimum + np.floor(w / w.sum() * extra).astype(np.int64)
    counts = np.minimum(counts, cap)
    # distribute the rounding remainder
    short = total - counts.sum()
    order = rng.permutation(M)
    k = 0
    while short > 0:
        i = order[k % M]
        if counts[i] < cap:
            counts[i] += 1
            short -= 1
        k += 1
    return counts


def synthetic_movielens_100k(seed: int = 0, M: int = 943, N: int = 1682,
                             nnz: int = 100_000, n_genres: int = 24,
                             series_size: int = 4,
                             noise_sd: float = 0.70) -> SparseRatings:
    """MovieLens-100K-shaped integer ratings with planted structure.

    Besides user/item biases and a low-rank factor component, items belong to
    genres (shaping their factors) and to small "series" whose members tend
    to be co-rated and carry a shared per-(user, series) effect.  The series
    component has rank N/series_size, far above any practical model rank, so
    it rewards item-neighborhood modeling rather than a plain low-rank fit.
    """
    rng = np.random.default_rng(seed)
    F_true = 6
    mu0 = 3.6
    b_user = rng.normal(0.0, 0.35, size=M)
    b_item = rng.normal(0.0, 0.45, size=N)
    u = rng.normal(0.0, 0.35, size=(M, F_true))
    genre = rng.integers(0, n_genres, size=N)
    centers = rng.normal(0.0, 0.30, size=(n_genres, F_true))
    v = centers[genre] + rng.normal(0.0, 0.15, size=(N, F_true))
    affinity = rng.normal(0.0, 0.20, size=(M, n_genres))

    n_series = N // series_size
    series = rng.permutation(N) % n_series
    series_eff = rng.normal(0.0, 0.40, size=(M, n_series))

    popularity = rng.lognormal(0.0, 1.2, size=N)
    popularity /= popularity.sum()
    counts = _sample_counts(rng, M, nnz, minimum=20, cap=int(N * 0.4))

    series_members = [np.flatnonzero(series == s) for s in range(n_series)]
    rows = np.empty(nnz, dtype=np.int32)
    cols = np.empty(nnz, dtype=np.int32)
    pos = 0
    for i in range(M):
        k = int(counts[i])
        # seed picks by popularity, then tend to complete the series they touch
        picked: set = set()
        seeds = rng.choice(N, size=k, replace=False, p=popularity)
        s_idx = 0
        while len(picked) < k:
            j = int(seeds[s_idx % k])
            s_idx += 1
            if j in picked:
                continue
            picked.add(j)
            if len(picked) >= k:
                break
            for mate in series_members[series[j]]:
                if len(picked) >= k:
                    break
                if int(mate) not in picked and rng.random() < 0.5:
                    picked.add(int(mate))
        picks = np.fromiter(picked, dtype=np.int32, count=k)
        rows[pos:pos + k] = i
        cols[pos:pos + k] = picks
        pos += k

    score = (mu0 + b_user[rows] + b_item[cols]
             + np.einsum("kf,kf->k", u[rows], v[cols])
             + affinity[rows, genre[cols]]
             + series_eff[rows, series[cols]]
             + rng.normal(0.0, noise_sd, size=nnz))
    values = np.clip(np.rint(score), 1.0, 5.0)
    return SparseRatings(M, N, rows, cols, values)


def planted_clusters(seed: int = 0, M: int = 500, N: int = 500,
                     n_clusters: int = 25, fans_per_cluster: int = 20,
                     noise_entries_per_col: int = 2):
    """Columns in the same cluster share raters and near-identical values.

    Returns (ratings, labels): labels[j] is column j's cluster.  Every column
    of cluster c is rated by the cluster's fan rows with a shared per-row
    value pattern plus small noise, plus a few random entries, so in-cluster
    pairs are highly similar under Pearson, Jaccard and cosine alike.
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_clusters), N // n_clusters)
    labels = np.concatenate([labels, rng.integers(0, n_clusters, size=N - len(labels))])
    pattern = rng.uniform(1.0, 5.0, size=(n_clusters, fans_per_cluster))

    seen = set()
    rows, cols, vals = [], [], []
    for j in range(N):
        c = int(labels[j])
        fan_rows = np.arange(c * fans_per_cluster, (c + 1) * fans_per_cluster) % M
        for t, i in enumerate(fan_rows):
            if (int(i), j) in seen:
                continue
            seen.add((int(i), j))
            v = pattern[c, t] + rng.normal(0.0, 0.10)
            rows.append(i)
            cols.append(j)
            vals.append(float(np.clip(np.rint(v), 1.0, 5.0)))
        for i in rng.integers(0, M, size=noise_entries_per_col):
            if (int(i), j) in seen:
                continue
            seen.add((int(i), j))
            rows.append(int(i))
            cols.append(j)
            vals.append(float(rng.integers(1, 6)))
    ratings = SparseRatings(M, N,
                            np.asarray(rows, dtype=np.int32),
                            np.asarray(cols, dtype=np.int32),
                            np.asarray(vals, dtype=np.float64))
    return ratings, labels


def random_sparse(M: int, N: int, density: float, seed: int = 0,
                  integer_values: bool = True) -> SparseRatings:
    """Uniform random sparse matrix at the given density, values in 1..5."""
    rng = np.random.default_rng(seed)
    rows, cols = [], []
    per_col = rng.binomial(M, density, size=N)
    per_col = np.maximum(per_col, 1)
    for j in range(N):
        picks = rng.choice(M, size=per_col[j], replace=False)
        rows.append(picks)
        cols.append(np.full(per_col[j], j, dtype=np.int32))
    rows = np.concatenate(rows).astype(np.int32)
    cols = np.concatenate(cols)
    if integer_values:
        vals = rng.integers(1, 6, size=len(rows)).astype(np.float64)
    else:
        vals = rng.uniform(0.5, 5.0, size=len(rows))
    return SparseRatings(M, N, rows, cols, vals)


def low_rank_matrix(M: int = 20, N: int = 20, F: int = 2, seed: int = 0) -> SparseRatings:
    """Fully observed exact rank-F matrix with positive entries."""
    rng = np.random.default_rng(seed)
    U0 = rng.uniform(0.2, 1.2, size=(M, F))
    V0 = rng.uniform(0.2, 1.2, size=(N, F))
    R = U0 @ V0.T
    rows, cols = np.meshgrid(np.arange(M, dtype=np.int32),
                             np.arange(N, dtype=np.int32), indexing="ij")
    return SparseRatings(M, N, rows.ravel(), cols.ravel(), R.ravel())
