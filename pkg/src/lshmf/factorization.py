"""Low-rank model with neighborhood terms: prediction, SGD training, RMSE.

The predicted value is

    baseline(i, j) + explicit neighbor term + implicit neighbor term + u_i . v_j

where baseline(i, j) = mu + b_i + b_hat_j.  The explicit term averages
W-weighted residuals of the neighbors the row actually rated, the implicit
term averages the C entries of the rest; each sum is scaled by the inverse
square root of its set size and drops out when the set is empty.

Residuals inside the explicit term are taken against the data-derived
baseline statistics (row/column mean deviations), which stay fixed during
training.  The trainable b and b_hat start at those statistics and evolve
independently.  With coefficients fixed this way, every stochastic update
rule below is the exact gradient step of the squared-error objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .data import BaselineStats, SparseRatings, Triplets
from .similarity import NeighborTable

MODEL_MAGIC = "LSHMF-M"
MODEL_VERSION = "v1"


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite value appears during training."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


def learning_rate(alpha: float, beta: float, t: int) -> float:
    """Decayed rate alpha / (1 + beta * t^1.5) at epoch t (t=0 gives alpha)."""
    return alpha / (1.0 + beta * t ** 1.5)


@dataclass
class TrainConfig:
    """Rank, neighbor count, per-parameter rates/regularizers and schedule.

    Defaults are the published MovieLens settings of the full neighborhood
    model; basic-MF runs typically override alpha_u/alpha_v/lambda_u/lambda_v.
    """

    F: int = 32
    K: int = 32
    alpha_b: float = 0.035
    alpha_b_hat: float = 0.035
    alpha_u: float = 0.035
    alpha_v: float = 0.035
    alpha_w: float = 0.002
    alpha_c: float = 0.002
    beta: float = 0.3
    lambda_b: float = 0.02
    lambda_b_hat: float = 0.02
    lambda_u: float = 0.02
    lambda_v: float = 0.02
    lambda_w: float = 0.002
    lambda_c: float = 0.002
    epochs: int = 50
    init_scale: float | None = None
    seed: int = 0
    clamp_range: tuple[float, float] | None = None

    def validate(self) -> None:
        for name in ("alpha_b", "alpha_b_hat", "alpha_u", "alpha_v", "alpha_w", "alpha_c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_b", "lambda_b_hat", "lambda_u", "lambda_v",
                     "lambda_w", "lambda_c", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def rates_at(self, t: int) -> tuple:
        return (learning_rate(self.alpha_b, self.beta, t),
                learning_rate(self.alpha_b_hat, self.beta, t),
                learning_rate(self.alpha_u, self.beta, t),
                learning_rate(self.alpha_v, self.beta, t),
                learning_rate(self.alpha_w, self.beta, t),
                learning_rate(self.alpha_c, self.beta, t))

    @property
    def regs(self) -> tuple:
        return (self.lambda_b, self.lambda_b_hat, self.lambda_u,
                self.lambda_v, self.lambda_w, self.lambda_c)

    @property
    def effective_init_scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 1.0 / np.sqrt(self.F)


_EMPTY_NBR = np.zeros((0, 0), dtype=np.int32)


@dataclass
class ModelParams:
    """All trainable state plus the neighbor table it is aligned with."""

    mu: float
    b: np.ndarray
    b_hat: np.ndarray
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    C: np.ndarray
    neighbors: NeighborTable | None = None

    @property
    def M(self) -> int:
        return len(self.b)

    @property
    def N(self) -> int:
        return len(self.b_hat)

    @property
    def F(self) -> int:
        return self.U.shape[1]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    def nbr_entries(self) -> np.ndarray:
        if self.neighbors is None:
            return np.zeros((self.N, 0), dtype=np.int32)
        return self.neighbors.entries

    def copy(self) -> "ModelParams":
        nbr = None
        if self.neighbors is not None:
            nbr = NeighborTable(self.neighbors.N, self.neighbors.K,
                                self.neighbors.entries.copy())
        return ModelParams(self.mu, self.b.copy(), self.b_hat.copy(),
                           self.U.copy(), self.V.copy(), self.W.copy(),
                           self.C.copy(), nbr)

    def all_finite(self) -> bool:
        return (np.isfinite(self.mu)
                and np.isfinite(self.b).all() and np.isfinite(self.b_hat).all()
                and np.isfinite(self.U).all() and np.isfinite(self.V).all()
                and np.isfinite(self.W).all() and np.isfinite(self.C).all())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(f"{MODEL_MAGIC} {MODEL_VERSION} {self.M} {self.N} "
                     f"{self.F} {self.K}\n".encode())
            fh.write(struct.pack("<d", self.mu))
            for arr in (self.b, self.b_hat, self.U, self.V, self.W, self.C):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.nbr_entries(), dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            if len(header) != 6 or header[0] != MODEL_MAGIC or header[1] != MODEL_VERSION:
                raise ValueError(f"{path}: not a {MODEL_MAGIC} {MODEL_VERSION} file")
            M, N, F, K = (int(x) for x in header[2:])
            mu = struct.unpack("<d", fh.read(8))[0]

            def read_f8(*shape):
                n = int(np.prod(shape))
                return np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()

            b = read_f8(M)
            b_hat = read_f8(N)
            U = read_f8(M, F)
            V = read_f8(N, F)
            W = read_f8(N, K)
            C = read_f8(N, K)
            entries = np.frombuffer(fh.read(4 * N * K), dtype="<u4")
            entries = entries.reshape(N, K).astype(np.int32)
        neighbors = NeighborTable(N=N, K=K, entries=entries) if K > 0 else None
        return cls(mu, b, b_hat, U, V, W, C, neighbors)


@dataclass
class NeighborSplit:
    """Positions k of a column's neighbor list split by whether row i rated them."""

    explicit: np.ndarray
    implicit: np.ndarray


def init_params(M: int, N: int, F: int, K: int, neighbors: NeighborTable | None,
                baselines: BaselineStats, config: TrainConfig) -> ModelParams:
    """Biases from the baseline statistics, U/V uniform in [0, init_scale], W/C zero.

    Zero W and C keep the initial model identical to the basic one.
    """
    if neighbors is not None and (neighbors.N != N or neighbors.K != K):
        raise ValueError("neighbor table does not match N, K")
    rng = np.random.default_rng(config.seed)
    scale = config.effective_init_scale
    U = rng.uniform(0.0, scale, size=(M, F))
    V = rng.uniform(0.0, scale, size=(N, F))
    return ModelParams(mu=baselines.mu, b=baselines.b.copy(),
                       b_hat=baselines.b_hat.copy(), U=U, V=V,
                       W=np.zeros((N, K)), C=np.zeros((N, K)),
                       neighbors=neighbors)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _lookup(row_ptr, row_cols, row_vals, i, j):
    """Rating at (i, j) via binary search in row i; NaN when absent."""
    lo = row_ptr[i]
    hi = row_ptr[i + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        c = row_cols[mid]
        if c == j:
            return row_vals[mid]
        if c < j:
            lo = mid + 1
        else:
            hi = mid
    return np.nan


@njit(cache=True, nogil=True)
def _predict_one(i, j, mu, b, bhat, U, V, W, C, nbr, base_b, base_bhat,
                 row_ptr, row_cols, row_vals):
    F = U.shape[1]
    K = nbr.shape[1]
    pred = mu + b[i] + bhat[j]
    dot = 0.0
    for f in range(F):
        dot += U[i, f] * V[j, f]
    pred += dot
    if K > 0:
        nr = 0
        nn = 0
        sw = 0.0
        sc = 0.0
        for k in range(K):
            j1 = nbr[j, k]
            rv = _lookup(row_ptr, row_cols, row_vals, i, j1)
            if not np.isnan(rv):
                nr += 1
                sw += (rv - (mu + base_b[i] + base_bhat[j1])) * W[j, k]
            else:
                nn += 1
                sc += C[j, k]
        if nr > 0:
            pred += sw / np.sqrt(nr)
        if nn > 0:
            pred += sc / np.sqrt(nn)
    return pred


@njit(cache=True, nogil=True)
def _update_one(i, j, r, mu, b, bhat, U, V, W, C, nbr, base_b, base_bhat,
                row_ptr, row_cols, row_vals,
                gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                update_row, update_col, expl, resid):
    """One stochastic step on sample (i, j, r); returns the pre-update error.

    The error is computed once from pre-update values, then all rules fire;
    the u update reads the pre-update v and vice versa.
    """
    F = U.shape[1]
    K = nbr.shape[1]
    pred = mu + b[i] + bhat[j]
    dot = 0.0
    for f in range(F):
        dot += U[i, f] * V[j, f]
    pred += dot
    nr = 0
    nn = 0
    sw = 0.0
    sc = 0.0
    for k in range(K):
        j1 = nbr[j, k]
        rv = _lookup(row_ptr, row_cols, row_vals, i, j1)
        if not np.isnan(rv):
            expl[k] = 1
            resid[k] = rv - (mu + base_b[i] + base_bhat[j1])
            nr += 1
            sw += resid[k] * W[j, k]
        else:
            expl[k] = 0
            nn += 1
            sc += C[j, k]
    if nr > 0:
        pred += sw / np.sqrt(nr)
    if nn > 0:
        pred += sc / np.sqrt(nn)
    e = r - pred

    inv_r = 1.0 / np.sqrt(nr) if nr > 0 else 0.0
    inv_n = 1.0 / np.sqrt(nn) if nn > 0 else 0.0
    if update_row:
        b[i] += gb * (e - lb * b[i])
    if update_col:
        bhat[j] += gbh * (e - lbh * bhat[j])
    if update_row and update_col:
        for f in range(F):
            uf = U[i, f]
            vf = V[j, f]
            U[i, f] = uf + gu * (e * vf - lu * uf)
            V[j, f] = vf + gv * (e * uf - lv * vf)
    elif update_row:
        for f in range(F):
            U[i, f] += gu * (e * V[j, f] - lu * U[i, f])
    elif update_col:
        for f in range(F):
            V[j, f] += gv * (e * U[i, f] - lv * V[j, f])
    if update_col:
        for k in range(K):
            if expl[k] != 0:
                W[j, k] += gw * (inv_r * e * resid[k] - lw * W[j, k])
            else:
                C[j, k] += gc * (inv_n * e - lc * C[j, k])
    return e


@njit(cache=True, nogil=True)
def _full_pass_block(col_lo, col_hi, row_lo, row_hi,
                     col_ptr, col_rows, col_vals, row_ptr, row_cols, row_vals,
                     mu, b, bhat, U, V, W, C, nbr, base_b, base_bhat,
                     gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                     update_row, update_col):
    """Column-major training pass over one (row range) x (column range) block.

    Returns 0, or 1 if a non-finite error appeared (divergence).
    """
    K = nbr.shape[1]
    expl = np.empty(max(K, 1), dtype=np.uint8)
    resid = np.empty(max(K, 1), dtype=np.float64)
    M = len(row_ptr) - 1
    for j in range(col_lo, col_hi):
        lo = col_ptr[j]
        hi = col_ptr[j + 1]
        a = lo
        c = hi
        if row_lo > 0:
            a = lo + np.searchsorted(col_rows[lo:hi], row_lo)
        if row_hi < M:
            c = lo + np.searchsorted(col_rows[lo:hi], row_hi)
        for idx in range(a, c):
            i = col_rows[idx]
            e = _update_one(i, j, col_vals[idx], mu, b, bhat, U, V, W, C, nbr,
                            base_b, base_bhat, row_ptr, row_cols, row_vals,
                            gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                            update_row, update_col, expl, resid)
            if not np.isfinite(e):
                return 1
    return 0


@njit(cache=True, nogil=True)
def _basic_pass(rows_subset, row_ptr, row_cols, row_vals, mu, b, bhat, U, V,
                use_biases, gb, gbh, gu, gv, lb, lbh, lu, lv):
    """Row-major basic-MF pass (U, V and optionally the biases)."""
    F = U.shape[1]
    for ii in range(len(rows_subset)):
        i = rows_subset[ii]
        for idx in range(row_ptr[i], row_ptr[i + 1]):
            j = row_cols[idx]
            pred = 0.0
            if use_biases:
                pred = mu + b[i] + bhat[j]
            for f in range(F):
                pred += U[i, f] * V[j, f]
            e = row_vals[idx] - pred
            if not np.isfinite(e):
                return 1
            if use_biases:
                b[i] += gb * (e - lb * b[i])
                bhat[j] += gbh * (e - lbh * bhat[j])
            for f in range(F):
                uf = U[i, f]
                vf = V[j, f]
                U[i, f] = uf + gu * (e * vf - lu * uf)
                V[j, f] = vf + gv * (e * uf - lv * vf)
    return 0


@njit(cache=True, nogil=True)
def _rmse_kernel(t_rows, t_cols, t_vals, mu, b, bhat, U, V, W, C, nbr,
                 base_b, base_bhat, row_ptr, row_cols, row_vals,
                 do_clamp, clamp_lo, clamp_hi, unscale):
    total = 0.0
    for k in range(len(t_rows)):
        pred = _predict_one(t_rows[k], t_cols[k], mu, b, bhat, U, V, W, C, nbr,
                            base_b, base_bhat, row_ptr, row_cols, row_vals)
        if do_clamp:
            if pred < clamp_lo:
                pred = clamp_lo
            elif pred > clamp_hi:
                pred = clamp_hi
        d = (pred - t_vals[k]) * unscale
        total += d * d
    return np.sqrt(total / len(t_rows))


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def _residual_baselines(ratings: SparseRatings):
    stats = ratings.baselines()
    return stats.b, stats.b_hat


def split_neighbors(i: int, j: int, neighbors: NeighborTable,
                    ratings: SparseRatings) -> NeighborSplit:
    """Partition column j's neighbor positions by whether row i rated them."""
    explicit = []
    implicit = []
    for k in range(neighbors.K):
        j1 = int(neighbors.entries[j, k])
        if ratings.rating(i, j1) is not None:
            explicit.append(k)
        else:
            implicit.append(k)
    return NeighborSplit(explicit=np.asarray(explicit, dtype=np.int64),
                         implicit=np.asarray(implicit, dtype=np.int64))


def predict(i: int, j: int, params: ModelParams, ratings: SparseRatings,
            clamp: tuple[float, float] | None = None) -> float:
    """Predicted value at (i, j); clamping is an evaluation-time option."""
    if not (0 <= i < params.M and 0 <= j < params.N):
        raise IndexError(f"index ({i}, {j}) out of range for {params.M}x{params.N} model")
    base_b, base_bhat = _residual_baselines(ratings)
    pred = _predict_one(i, j, params.mu, params.b, params.b_hat, params.U,
                        params.V, params.W, params.C, params.nbr_entries(),
                        base_b, base_bhat,
                        ratings.row_ptr, ratings.row_cols, ratings.row_vals)
    if clamp is not None:
        pred = min(max(pred, clamp[0]), clamp[1])
    return float(pred)


def sgd_update(i: int, j: int, params: ModelParams, rates: tuple, regs: tuple,
               ratings: SparseRatings) -> float:
    """Apply all six update rules at sample (i, j) in place; returns the error.

    ``rates`` and ``regs`` are (b, b_hat, u, v, w, c) tuples.
    """
    r = ratings.rating(i, j)
    if r is None:
        raise ValueError(f"no rating at ({i}, {j})")
    base_b, base_bhat = _residual_baselines(ratings)
    K = params.K
    expl = np.empty(max(K, 1), dtype=np.uint8)
    resid = np.empty(max(K, 1), dtype=np.float64)
    e = _update_one(i, j, r, params.mu, params.b, params.b_hat, params.U,
                    params.V, params.W, params.C, params.nbr_entries(),
                    base_b, base_bhat,
                    ratings.row_ptr, ratings.row_cols, ratings.row_vals,
                    rates[0], rates[1], rates[2], rates[3], rates[4], rates[5],
                    regs[0], regs[1], regs[2], regs[3], regs[4], regs[5],
                    True, True, expl, resid)
    if not np.isfinite(e):
        raise TrainingDivergedError(epoch=0)
    return float(e)


def train_basic(ratings: SparseRatings, config: TrainConfig,
                with_biases: bool = False, sort_rows_by_count: bool = False,
                racy_workers: int = 0, epoch_callback=None) -> ModelParams:
    """Basic MF: row-major SGD over U and V (biases optional, off by default).

    ``racy_workers > 0`` runs that many threads over row shards sharing V
    without coordination; fast but non-deterministic, mirroring direct
    global-memory column updates.
    """
    config.validate()
    M, N = ratings.M, ratings.N
    rng = np.random.default_rng(config.seed)
    scale = config.effective_init_scale
    U = rng.uniform(0.0, scale, size=(M, config.F))
    V = rng.uniform(0.0, scale, size=(N, config.F))
    if with_biases:
        stats = ratings.baselines()
        mu, b, bhat = stats.mu, stats.b.copy(), stats.b_hat.copy()
    else:
        mu, b, bhat = 0.0, np.zeros(M), np.zeros(N)
    params = ModelParams(mu=mu, b=b, b_hat=bhat, U=U, V=V,
                         W=np.zeros((N, 0)), C=np.zeros((N, 0)), neighbors=None)

    if sort_rows_by_count:
        counts = np.diff(ratings.row_ptr)
        row_order = np.argsort(-counts, kind="stable").astype(np.int64)
    else:
        row_order = np.arange(M, dtype=np.int64)

    for t in range(config.epochs):
        gb, gbh, gu, gv, _, _ = config.rates_at(t)
        if racy_workers > 0:
            from concurrent.futures import ThreadPoolExecutor
            shards = np.array_split(row_order, racy_workers)
            with ThreadPoolExecutor(max_workers=racy_workers) as pool:
                futs = [pool.submit(_basic_pass, shard, ratings.row_ptr,
                                    ratings.row_cols, ratings.row_vals, mu, b,
                                    bhat, U, V, with_biases, gb, gbh, gu, gv,
                                    config.lambda_b, config.lambda_b_hat,
                                    config.lambda_u, config.lambda_v)
                        for shard in shards if len(shard)]
                bad = any(f.result() for f in futs)
        else:
            bad = _basic_pass(row_order, ratings.row_ptr, ratings.row_cols,
                              ratings.row_vals, mu, b, bhat, U, V, with_biases,
                              gb, gbh, gu, gv, config.lambda_b,
                              config.lambda_b_hat, config.lambda_u, config.lambda_v)
        if bad:
            raise TrainingDivergedError(epoch=t)
        if epoch_callback is not None:
            epoch_callback(t, params)
    return params


def train_full(ratings: SparseRatings, neighbors: NeighborTable | None,
               config: TrainConfig, epoch_callback=None) -> ModelParams:
    """Full neighborhood model: column-major SGD over all six parameter classes."""
    config.validate()
    K = neighbors.K if neighbors is not None else 0
    if K != config.K:
        config = replace(config, K=K)
    stats = ratings.baselines()
    params = init_params(ratings.M, ratings.N, config.F, K, neighbors, stats, config)
    base_b, base_bhat = _residual_baselines(ratings)
    nbr = params.nbr_entries()
    for t in range(config.epochs):
        gb, gbh, gu, gv, gw, gc = config.rates_at(t)
        lb, lbh, lu, lv, lw, lc = config.regs
        bad = _full_pass_block(0, ratings.N, 0, ratings.M,
                               ratings.col_ptr, ratings.col_rows, ratings.col_vals,
                               ratings.row_ptr, ratings.row_cols, ratings.row_vals,
                               params.mu, params.b, params.b_hat, params.U,
                               params.V, params.W, params.C, nbr,
                               base_b, base_bhat,
                               gb, gbh, gu, gv, gw, gc, lb, lbh, lu, lv, lw, lc,
                               True, True)
        if bad:
            raise TrainingDivergedError(epoch=t)
        if epoch_callback is not None:
            epoch_callback(t, params)
    return params


def rmse(params: ModelParams, testset: Triplets, ratings: SparseRatings,
         unscale: float | None = None,
         clamp: tuple[float, float] | None = None) -> float:
    """Root-mean-square prediction error over the held-out triplets.

    Predictions are optionally clamped, and errors multiplied by ``unscale``
    to undo an ingestion-time rating scale.
    """
    if len(testset) == 0:
        raise ValueError("empty test set")
    base_b, base_bhat = _residual_baselines(ratings)
    do_clamp = clamp is not None
    lo, hi = clamp if do_clamp else (0.0, 0.0)
    return float(_rmse_kernel(
        np.ascontiguousarray(testset.rows, dtype=np.int32),
        np.ascontiguousarray(testset.cols, dtype=np.int32),
        np.ascontiguousarray(testset.values, dtype=np.float64),
        params.mu, params.b, params.b_hat, params.U, params.V, params.W,
        params.C, params.nbr_entries(), base_b, base_bhat,
        ratings.row_ptr, ratings.row_cols, ratings.row_vals,
        do_clamp, lo, hi, 1.0 if unscale is None else float(unscale)))


def objective_value(params: ModelParams, ratings: SparseRatings, regs: tuple) -> float:
    """Full-batch regularized squared-error objective."""
    base_b, base_bhat = _residual_baselines(ratings)
    nbr = params.nbr_entries()
    total = 0.0
    for k in range(ratings.nnz):
        i = int(ratings.entry_rows[k])
        j = int(ratings.entry_cols[k])
        pred = _predict_one(i, j, params.mu, params.b, params.b_hat, params.U,
                            params.V, params.W, params.C, nbr, base_b, base_bhat,
                            ratings.row_ptr, ratings.row_cols, ratings.row_vals)
        total += (float(ratings.entry_values[k]) - pred) ** 2
    lb, lbh, lu, lv, lw, lc = regs
    total += lb * float(np.sum(params.b ** 2))
    total += lbh * float(np.sum(params.b_hat ** 2))
    total += lu * float(np.sum(params.U ** 2))
    total += lv * float(np.sum(params.V ** 2))
    total += lw * float(np.sum(params.W ** 2))
    total += lc * float(np.sum(params.C ** 2))
    return total
