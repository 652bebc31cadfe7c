"""Conflict-free multi-worker training over a D x D block grid.

The matrix is cut into D row blocks and D column blocks.  Worker d
permanently owns column block d (and its column parameters V, b_hat, W, C);
each epoch runs D stages, and in stage s worker d processes the block at
row block (d + s) mod D, owning that row block's U and b slices for the
stage.  Within a stage no two workers share a row or column block, so every
parameter is written by at most one worker; stages are separated by a full
barrier at which row-block ownership rotates.

Workers process their block's entries in column-major order, matching the
serial full-model pass, so D=1 reproduces serial training bit for bit.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import SparseRatings
from .factorization import (TrainConfig, TrainingDivergedError, _update_one,
                            init_params)
from .similarity import NeighborTable


@dataclass
class RotationSchedule:
    """D stages; worker d takes row block (d + s) mod D at stage s (0-based)."""

    D: int

    def row_block(self, worker: int, stage: int) -> int:
        return (worker + stage) % self.D

    def stage_assignments(self, stage: int):
        """(worker, row_block, col_block) triples for one stage."""
        return [(d, self.row_block(d, stage), d) for d in range(self.D)]

    def validate(self) -> None:
        seen = np.zeros((self.D, self.D), dtype=bool)
        for s in range(self.D):
            rows = [self.row_block(d, s) for d in range(self.D)]
            if len(set(rows)) != self.D:
                raise ValueError(f"stage {s} assigns a row block twice")
            for d, r in enumerate(rows):
                seen[r, d] = True
        if not seen.all():
            raise ValueError("schedule does not cover every block")


@njit(cache=True)
def _block_pointers(col_ptr, col_rows, row_bounds):
    N = len(col_ptr) - 1
    nb = len(row_bounds)
    out = np.empty((N, nb), dtype=np.int64)
    for j in range(N):
        lo, hi = col_ptr[j], col_ptr[j + 1]
        for r in range(nb):
            out[j, r] = lo + np.searchsorted(col_rows[lo:hi], row_bounds[r])
    return out


@dataclass
class BlockPartition:
    """Contiguous near-equal D x D blocking of the nonzero set."""

    D: int
    row_bounds: np.ndarray  # (D+1,)
    col_bounds: np.ndarray  # (D+1,)
    block_ptr: np.ndarray   # (N, D+1) pointers into the CSC arrays
    ratings: SparseRatings

    def block_nnz(self, d1: int, d2: int) -> int:
        """Entry count of block (row block d1, column block d2)."""
        cols = slice(self.col_bounds[d2], self.col_bounds[d2 + 1])
        return int((self.block_ptr[cols, d1 + 1] - self.block_ptr[cols, d1]).sum())

    def block_triplets(self, d1: int, d2: int):
        """(rows, cols, values) of one block, in column-major order."""
        rows = []
        cols = []
        vals = []
        r = self.ratings
        for j in range(self.col_bounds[d2], self.col_bounds[d2 + 1]):
            lo, hi = self.block_ptr[j, d1], self.block_ptr[j, d1 + 1]
            rows.append(r.col_rows[lo:hi])
            cols.append(np.full(hi - lo, j, dtype=np.int32))
            vals.append(r.col_vals[lo:hi])
        if not rows:
            z = np.zeros(0)
            return z.astype(np.int32), z.astype(np.int32), z
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def make_partition(ratings: SparseRatings, D: int) -> BlockPartition:
    """Split rows and columns into D contiguous near-equal ranges each."""
    if D < 1 or D > min(ratings.M, ratings.N):
        raise ValueError(f"D={D} out of range for a {ratings.M}x{ratings.N} matrix")
    row_bounds = np.array([(d * ratings.M) // D for d in range(D + 1)], dtype=np.int64)
    col_bounds = np.array([(d * ratings.N) // D for d in range(D + 1)], dtype=np.int64)
    block_ptr = _block_pointers(ratings.col_ptr, ratings.col_rows, row_bounds)
    return BlockPartition(D=D, row_bounds=row_bounds, col_bounds=col_bounds,
                          block_ptr=block_ptr, ratings=ratings)


@njit(cache=True, nogil=True)
def _stage_pass(col_lo, col_hi, rb, block_ptr, col_rows, col_vals,
                row_ptr, row_cols, row_vals,
                mu, b, bhat, U, V, W, C, nbr, base_b, base_bhat,
                gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc):
    """One worker's pass over its (row block rb) x (own column range) block."""
    K = nbr.shape[1]
    expl = np.empty(max(K, 1), dtype=np.uint8)
    resid = np.empty(max(K, 1), dtype=np.float64)
    for j in range(col_lo, col_hi):
        for idx in range(block_ptr[j, rb], block_ptr[j, rb + 1]):
            i = col_rows[idx]
            e = _update_one(i, j, col_vals[idx], mu, b, bhat, U, V, W, C, nbr,
                            base_b, base_bhat, row_ptr, row_cols, row_vals,
                            gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                            True, True, expl, resid)
            if not np.isfinite(e):
                return 1
    return 0


@dataclass
class InstrumentReport:
    """Record of per-stage write sets and per-epoch sample coverage."""

    stages_checked: int = 0
    disjoint_violations: int = 0
    epochs_checked: int = 0
    coverage_violations: int = 0

    @property
    def ok(self) -> bool:
        return self.disjoint_violations == 0 and self.coverage_violations == 0


def _check_stage_disjoint(part: BlockPartition, sched: RotationSchedule,
                          stage: int, report: InstrumentReport) -> int:
    """Verify no row or column parameter is touched by two workers."""
    row_sets = []
    col_sets = []
    samples = 0
    for d, rb, cb in sched.stage_assignments(stage):
        rows, cols, _ = part.block_triplets(rb, cb)
        samples += len(rows)
        row_sets.append(np.unique(rows))
        col_sets.append(np.unique(cols))
    report.stages_checked += 1
    for a in range(len(row_sets)):
        for b in range(a + 1, len(row_sets)):
            if len(np.intersect1d(row_sets[a], row_sets[b])):
                report.disjoint_violations += 1
            if len(np.intersect1d(col_sets[a], col_sets[b])):
                report.disjoint_violations += 1
    return samples


def parallel_train(ratings: SparseRatings, neighbors: NeighborTable | None,
                   config: TrainConfig, D: int, epoch_callback=None,
                   instrument: bool = False, stage_times: list | None = None):
    """Train the full model on D workers with the rotation schedule.

    Returns the trained params, or (params, InstrumentReport) when
    ``instrument`` is set.  D=1 degenerates to the serial pass.
    """
    config.validate()
    part = make_partition(ratings, D)
    sched = RotationSchedule(D)
    sched.validate()
    K = neighbors.K if neighbors is not None else 0
    stats = ratings.baselines()
    params = init_params(ratings.M, ratings.N, config.F, K, neighbors, stats, config)
    base_b, base_bhat = stats.b, stats.b_hat
    nbr = params.nbr_entries()
    r = ratings
    report = InstrumentReport()

    pool = ThreadPoolExecutor(max_workers=D) if D > 1 else None
    try:
        for t in range(config.epochs):
            gb, gbh, gu, gv, gw, gc = config.rates_at(t)
            lb, lbh, lu, lv, lw, lc = config.regs
            epoch_samples = 0
            for s in range(D):
                t0 = time.perf_counter()
                if instrument:
                    epoch_samples += _check_stage_disjoint(part, sched, s, report)
                tasks = []
                for d, rb, cb in sched.stage_assignments(s):
                    args = (part.col_bounds[cb], part.col_bounds[cb + 1], rb,
                            part.block_ptr, r.col_rows, r.col_vals,
                            r.row_ptr, r.row_cols, r.row_vals,
                            params.mu, params.b, params.b_hat, params.U,
                            params.V, params.W, params.C, nbr, base_b, base_bhat,
                            gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc)
                    if pool is None:
                        tasks.append(_stage_pass(*args))
                    else:
                        tasks.append(pool.submit(_stage_pass, *args))
                if pool is None:
                    bad = any(tasks)
                else:
                    bad = any(f.result() for f in tasks)  # barrier
                if stage_times is not None:
                    stage_times.append((t, s, time.perf_counter() - t0))
                if bad:
                    raise TrainingDivergedError(epoch=t)
            if instrument:
                report.epochs_checked += 1
                if epoch_samples != ratings.nnz:
                    report.coverage_violations += 1
            if epoch_callback is not None:
                epoch_callback(t, params)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if instrument:
        return params, report
    return params
