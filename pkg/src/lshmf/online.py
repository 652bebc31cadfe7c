"""Absorb new rows and columns without retraining existing parameters.

The saved signed accumulators make the column encodings extendable: new
ratings only add terms to the per-bit sums, so old columns are re-encoded by
adding the new contributions and re-thresholding, and new columns are encoded
from scratch.  Old columns keep their existing neighbor lists; new columns
search neighbors over the full extended column set.  Training then touches
only the new variables' parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import SparseRatings, Triplets
from .factorization import (ModelParams, TrainConfig, TrainingDivergedError,
                            _update_one)
from .lsh import (HashState, RowHashes, _fill_candidates,
                  _fine_topk_core, _group_runs, _psi, _state_group_keys,
                  _threshold, assign_row_hashes)
from .similarity import NeighborTable


@dataclass
class IncrementBatch:
    """New-variable ratings in the extended index space.

    Rows >= base_M and columns >= base_N are the new variables; every triplet
    must involve at least one of them.
    """

    base_M: int
    base_N: int
    new_row_count: int
    new_col_count: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @property
    def M_hat(self) -> int:
        return self.base_M + self.new_row_count

    @property
    def N_hat(self) -> int:
        return self.base_N + self.new_col_count

    def validate(self) -> None:
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= self.M_hat:
                raise ValueError("increment row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.N_hat:
                raise ValueError("increment column index out of range")
            old_both = (self.rows < self.base_M) & (self.cols < self.base_N)
            if old_both.any():
                raise ValueError(
                    f"{int(old_both.sum())} increment entries touch no new variable")


def make_increment(base_M: int, base_N: int, triplets: Triplets,
                   new_row_count: int | None = None,
                   new_col_count: int | None = None) -> IncrementBatch:
    """Wrap extended-index triplets as an increment, deriving counts if absent."""
    rows, cols, values = triplets.rows, triplets.cols, triplets.values
    if new_row_count is None:
        top = int(rows.max()) + 1 if len(rows) else base_M
        new_row_count = max(0, top - base_M)
    if new_col_count is None:
        top = int(cols.max()) + 1 if len(cols) else base_N
        new_col_count = max(0, top - base_N)
    batch = IncrementBatch(base_M=base_M, base_N=base_N,
                           new_row_count=new_row_count,
                           new_col_count=new_col_count,
                           rows=np.asarray(rows, dtype=np.int32),
                           cols=np.asarray(cols, dtype=np.int32),
                           values=np.asarray(values, dtype=np.float64))
    batch.validate()
    return batch


def extend_ratings(ratings: SparseRatings, batch: IncrementBatch) -> SparseRatings:
    """The concatenated matrix over the extended index space."""
    if ratings.M != batch.base_M or ratings.N != batch.base_N:
        raise ValueError("increment base shape does not match ratings")
    return SparseRatings(
        batch.M_hat, batch.N_hat,
        np.concatenate([ratings.entry_rows, batch.rows]),
        np.concatenate([ratings.entry_cols, batch.cols]),
        np.concatenate([ratings.entry_values, batch.values]),
        ratings.row_ids, ratings.col_ids)


@njit(cache=True)
def _accumulate_into(acc, col_ptr, col_rows, col_vals, bits, e):
    """Add each rating's signed hash contribution into existing accumulators.

    Entries are consumed in ascending row order per column so the floating
    point sums match a from-scratch recomputation bit for bit.
    """
    N = len(col_ptr) - 1
    q = bits.shape[1]
    p = bits.shape[2]
    G = bits.shape[3]
    for j in range(N):
        for idx in range(col_ptr[j], col_ptr[j + 1]):
            i = col_rows[idx]
            psi = _psi(col_vals[idx], e)
            for g in range(q):
                for m in range(p):
                    for t in range(G):
                        if bits[i, g, m, t] != 0:
                            acc[j, g, m, t] += psi
                        else:
                            acc[j, g, m, t] -= psi


def update_hashes_incremental(state: HashState, batch: IncrementBatch,
                              hashes: RowHashes) -> HashState:
    """Extend the hash state by the increment's contributions.

    Old columns gain the new rows' terms on top of their saved accumulators;
    new columns are accumulated from scratch.  ``hashes`` must cover the
    extended row space.
    """
    if state.N != batch.base_N:
        raise ValueError(f"hash state covers {state.N} columns, "
                         f"expected {batch.base_N}")
    if hashes.M < batch.M_hat:
        raise ValueError("row hashes do not cover the new rows")
    batch.validate()
    cfg = state.config
    N_hat = batch.N_hat
    _, q, p, G = hashes.bits.shape
    acc = np.zeros((N_hat, q, p, G), dtype=np.float64)
    acc[:state.N] = state.acc

    # old columns only receive new-row contributions (row index above base_M),
    # which sort after every already-absorbed row
    order = np.lexsort((batch.rows, batch.cols))
    b_rows = batch.rows[order].astype(np.int32)
    b_vals = batch.values[order]
    b_cols = batch.cols[order]
    col_ptr = np.zeros(N_hat + 1, dtype=np.int64)
    np.cumsum(np.bincount(b_cols, minlength=N_hat), out=col_ptr[1:])
    _accumulate_into(acc, col_ptr, b_rows, b_vals, hashes.bits, cfg.psi_exponent)
    return HashState(acc=acc, sig=_threshold(acc), config=cfg)


def topk_for_new(state: HashState, existing: NeighborTable, K: int,
                 seed: int) -> NeighborTable:
    """Neighbor rows for the new columns over the full extended column set.

    Existing columns keep their rows unchanged; new columns get the same
    bucket-frequency selection with random supplement.
    """
    N_hat = state.N
    if K > N_hat - 1:
        raise ValueError(f"K={K} exceeds N-1={N_hat - 1}")
    if existing.K != K:
        raise ValueError(f"existing table has K={existing.K}, expected {K}")
    N_old = existing.N
    keys = _state_group_keys(state)
    q = keys.shape[0]
    orders = np.empty((q, N_hat), dtype=np.int64)
    run_start = np.empty((q, N_hat), dtype=np.int64)
    run_end = np.empty((q, N_hat), dtype=np.int64)
    for g in range(q):
        orders[g], run_start[g], run_end[g] = _group_runs(keys[g])
    n_new = N_hat - N_old
    entries = np.empty((N_hat, K), dtype=np.int32)
    entries[:N_old] = existing.entries
    if n_new > 0:
        new_start = np.ascontiguousarray(run_start[:, N_old:])
        new_end = np.ascontiguousarray(run_end[:, N_old:])
        counts = (new_end - new_start - 1).sum(axis=0)
        offsets = np.zeros(n_new + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        cand = _fill_candidates(orders, new_start, new_end, offsets, N_old)
        entries[N_old:] = _fine_topk_core(cand, offsets, n_new, K, seed,
                                          N_old, N_hat)
    return NeighborTable(N=N_hat, K=K, entries=entries)


def extend_params(params: ModelParams, batch: IncrementBatch,
                  neighbors_extended: NeighborTable,
                  config: TrainConfig) -> ModelParams:
    """Initialized parameter rows for the new variables, old rows copied.

    New biases start at the batch-local mean deviations (0 for variables with
    no ratings in the batch); new factors follow the usual uniform init.
    """
    if params.M != batch.base_M or params.N != batch.base_N:
        raise ValueError("params shape does not match increment base")
    if neighbors_extended.N != batch.N_hat:
        raise ValueError("extended neighbor table has wrong size")
    M_hat, N_hat = batch.M_hat, batch.N_hat
    F, K = params.F, params.K
    rng = np.random.default_rng((config.seed, 0x0B1))
    scale = config.effective_init_scale

    b = np.zeros(M_hat)
    b[:params.M] = params.b
    b_hat = np.zeros(N_hat)
    b_hat[:params.N] = params.b_hat
    if len(batch.rows):
        row_sum = np.zeros(M_hat)
        row_cnt = np.zeros(M_hat)
        np.add.at(row_sum, batch.rows, batch.values)
        np.add.at(row_cnt, batch.rows, 1.0)
        new = (np.arange(M_hat) >= params.M) & (row_cnt > 0)
        b[new] = row_sum[new] / row_cnt[new] - params.mu
        col_sum = np.zeros(N_hat)
        col_cnt = np.zeros(N_hat)
        np.add.at(col_sum, batch.cols, batch.values)
        np.add.at(col_cnt, batch.cols, 1.0)
        new = (np.arange(N_hat) >= params.N) & (col_cnt > 0)
        b_hat[new] = col_sum[new] / col_cnt[new] - params.mu

    U = np.vstack([params.U, rng.uniform(0.0, scale, size=(batch.new_row_count, F))])
    V = np.vstack([params.V, rng.uniform(0.0, scale, size=(batch.new_col_count, F))])
    W = np.vstack([params.W, np.zeros((batch.new_col_count, K))])
    C = np.vstack([params.C, np.zeros((batch.new_col_count, K))])
    return ModelParams(mu=params.mu, b=b, b_hat=b_hat, U=U, V=V, W=W, C=C,
                       neighbors=neighbors_extended)


@njit(cache=True, nogil=True)
def _online_row_pass(row_lo, row_hi, N_old, row_ptr, row_cols, row_vals,
                     col_ptr, col_rows, col_vals,
                     mu, b, bhat, U, V, W, C, nbr, base_b, base_bhat,
                     gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc):
    """New-row phase: update only b_i and u_i on (new row, old column) samples."""
    K = nbr.shape[1]
    expl = np.empty(max(K, 1), dtype=np.uint8)
    resid = np.empty(max(K, 1), dtype=np.float64)
    for i in range(row_lo, row_hi):
        for idx in range(row_ptr[i], row_ptr[i + 1]):
            j = row_cols[idx]
            if j >= N_old:
                continue
            e = _update_one(i, j, row_vals[idx], mu, b, bhat, U, V, W, C, nbr,
                            base_b, base_bhat, row_ptr, row_cols, row_vals,
                            gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                            True, False, expl, resid)
            if not np.isfinite(e):
                return 1
    return 0


@njit(cache=True, nogil=True)
def _online_col_pass(col_lo, col_hi, M_old, row_ptr, row_cols, row_vals,
                     col_ptr, col_rows, col_vals,
                     mu, b, bhat, U, V, W, C, nbr, base_b, base_bhat,
                     gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc):
    """New-column phase: update column parameters; rows participate only if new."""
    K = nbr.shape[1]
    expl = np.empty(max(K, 1), dtype=np.uint8)
    resid = np.empty(max(K, 1), dtype=np.float64)
    for j in range(col_lo, col_hi):
        for idx in range(col_ptr[j], col_ptr[j + 1]):
            i = col_rows[idx]
            e = _update_one(i, j, col_vals[idx], mu, b, bhat, U, V, W, C, nbr,
                            base_b, base_bhat, row_ptr, row_cols, row_vals,
                            gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                            i >= M_old, True, expl, resid)
            if not np.isfinite(e):
                return 1
    return 0


def train_incremental(params: ModelParams, batch: IncrementBatch,
                      neighbors_extended: NeighborTable,
                      ratings_extended: SparseRatings,
                      config: TrainConfig) -> ModelParams:
    """Train only the new variables' parameters on the increment.

    ``params`` must already be extended (see extend_params).  New rows train
    {b_i, u_i} on their old-column ratings; new columns train
    {b_hat_j, v_j, w_j, c_j} on all their ratings, and ratings pairing a new
    row with a new column train both sides.  Every pre-existing parameter is
    left bit-identical.
    """
    if params.M != batch.M_hat or params.N != batch.N_hat:
        raise ValueError("params must be extended to the increment's index space")
    if ratings_extended.M != batch.M_hat or ratings_extended.N != batch.N_hat:
        raise ValueError("ratings must cover the extended index space")
    stats = ratings_extended.baselines()
    base_b, base_bhat = stats.b, stats.b_hat
    nbr = params.nbr_entries()
    r = ratings_extended
    for t in range(config.epochs):
        gb, gbh, gu, gv, gw, gc = config.rates_at(t)
        lb, lbh, lu, lv, lw, lc = config.regs
        bad = _online_row_pass(batch.base_M, batch.M_hat, batch.base_N,
                               r.row_ptr, r.row_cols, r.row_vals,
                               r.col_ptr, r.col_rows, r.col_vals,
                               params.mu, params.b, params.b_hat, params.U,
                               params.V, params.W, params.C, nbr,
                               base_b, base_bhat,
                               gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc)
        if not bad:
            bad = _online_col_pass(batch.base_N, batch.N_hat, batch.base_M,
                                   r.row_ptr, r.row_cols, r.row_vals,
                                   r.col_ptr, r.col_rows, r.col_vals,
                                   params.mu, params.b, params.b_hat, params.U,
                                   params.V, params.W, params.C, nbr,
                                   base_b, base_bhat,
                                   gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc)
        if bad:
            raise TrainingDivergedError(epoch=t)
    return params


def absorb_increment(params: ModelParams, state: HashState,
                     ratings: SparseRatings, batch: IncrementBatch,
                     config: TrainConfig):
    """Full online step: extend hashes, find new neighbors, train new variables.

    Returns (params_ext, state_ext, ratings_ext, neighbors_ext).
    """
    hashes = assign_row_hashes(batch.M_hat, state.config)
    state_ext = update_hashes_incremental(state, batch, hashes)
    neighbors_ext = topk_for_new(state_ext, params.neighbors, params.K,
                                 state.config.seed)
    ratings_ext = extend_ratings(ratings, batch)
    params_ext = extend_params(params, batch, neighbors_ext, config)
    params_ext = train_incremental(params_ext, batch, neighbors_ext,
                                   ratings_ext, config)
    return params_ext, state_ext, ratings_ext, neighbors_ext


def holdback_variables(ratings: SparseRatings, n_rows: int, n_cols: int, seed: int):
    """Split a matrix into an original part and a new-variable increment.

    Picks ``n_rows`` rows and ``n_cols`` columns at random, reindexes them to
    the tail of the index space, and returns (original, batch, row_map,
    col_map) where the maps send full-matrix indices to the reindexed space.
    """
    rng = np.random.default_rng(seed)
    held_rows = rng.choice(ratings.M, size=n_rows, replace=False)
    held_cols = rng.choice(ratings.N, size=n_cols, replace=False)
    row_held = np.zeros(ratings.M, dtype=bool)
    row_held[held_rows] = True
    col_held = np.zeros(ratings.N, dtype=bool)
    col_held[held_cols] = True

    row_map = np.empty(ratings.M, dtype=np.int32)
    row_map[~row_held] = np.arange(ratings.M - n_rows)
    row_map[row_held] = ratings.M - n_rows + np.arange(n_rows)
    col_map = np.empty(ratings.N, dtype=np.int32)
    col_map[~col_held] = np.arange(ratings.N - n_cols)
    col_map[col_held] = ratings.N - n_cols + np.arange(n_cols)

    rows = row_map[ratings.entry_rows]
    cols = col_map[ratings.entry_cols]
    in_batch = row_held[ratings.entry_rows] | col_held[ratings.entry_cols]
    original = SparseRatings(ratings.M - n_rows, ratings.N - n_cols,
                             rows[~in_batch], cols[~in_batch],
                             ratings.entry_values[~in_batch])
    batch = IncrementBatch(base_M=ratings.M - n_rows, base_N=ratings.N - n_cols,
                           new_row_count=n_rows, new_col_count=n_cols,
                           rows=rows[in_batch].copy(), cols=cols[in_batch].copy(),
                           values=ratings.entry_values[in_batch].copy())
    batch.validate()
    return original, batch, row_map, col_map
