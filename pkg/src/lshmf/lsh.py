"""Hash-based approximate Top-K neighbor search for sparse columns.

Each column is encoded as a G-bit signature: every row carries random G-bit
hashes, each rating contributes its row hash (bits mapped 0/1 -> -1/+1)
weighted by psi(rating) = rating**e, and the signed per-bit totals are
thresholded at zero (nonnegative -> 1).  Requiring equality across p
independent maps suppresses false positives; repeating that over q groups
and keeping the most frequent bucket-mates recovers recall.

The signed accumulators are kept so that new rows or columns can be absorbed
later without rehashing the whole matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .data import SparseRatings
from .similarity import NeighborTable, _topk_insert

U64 = np.uint64

HASHSTATE_MAGIC = "LSHMF-H"
HASHSTATE_VERSION = "v1"


@dataclass
class LshConfig:
    """Signature parameters: G bits per map, p maps per group, q groups."""

    G: int = 8
    p: int = 3
    q: int = 100
    psi_exponent: int = 2
    seed: int = 0

    def validate(self) -> None:
        if not (1 <= self.G <= 64):
            raise ValueError(f"G must be in [1, 64], got {self.G}")
        if self.p < 1 or self.q < 1:
            raise ValueError("p and q must be >= 1")
        if self.p * self.G > 64:
            raise ValueError(f"p*G = {self.p * self.G} exceeds the 64-bit bucket key")
        if self.psi_exponent not in (1, 2, 4):
            raise ValueError(f"psi_exponent must be 1, 2 or 4, got {self.psi_exponent}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@njit(cache=True)
def _splitmix64(x):
    z = x + U64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
    return z ^ (z >> U64(31))


@njit(cache=True)
def _map_key(seed, g, m):
    h = _splitmix64(U64(seed))
    h = _splitmix64(h ^ (U64(g + 1) * U64(0x9E3779B97F4A7C15)))
    return _splitmix64(h ^ (U64(m + 1) * U64(0xBF58476D1CE4E5B9)))


@njit(cache=True)
def _assign_bits(seed, q, p, M, G):
    bits = np.empty((M, q, p, G), dtype=np.uint8)
    for g in range(q):
        for m in range(p):
            key = _map_key(seed, g, m)
            for i in range(M):
                h = _splitmix64(key ^ U64(i))
                for t in range(G):
                    bits[i, g, m, t] = np.uint8((h >> U64(t)) & U64(1))
    return bits


@dataclass
class RowHashes:
    """Random G-bit row hashes for all p*q maps, keyed by (seed, group, map, row).

    The per-row bits are a pure function of those four values, so extending
    to more rows reproduces the existing bits exactly.
    """

    bits: np.ndarray  # (M, q, p, G) uint8
    seed: int

    @property
    def M(self) -> int:
        return self.bits.shape[0]

    def map_bits(self, g: int, m: int) -> np.ndarray:
        """The M x G bit matrix of group g, map m."""
        return self.bits[:, g, m, :]

    def extended(self, M_new: int) -> "RowHashes":
        if M_new < self.M:
            raise ValueError("cannot shrink row hashes")
        _, q, p, G = self.bits.shape
        bits = _assign_bits(self.seed, q, p, M_new, G)
        return RowHashes(bits=bits, seed=self.seed)


def assign_row_hashes(M: int, config: LshConfig) -> RowHashes:
    """Draw independent uniform G-bit hashes for every (group, map, row)."""
    config.validate()
    if M < 0:
        raise ValueError("M must be nonnegative")
    bits = _assign_bits(config.seed, config.q, config.p, M, config.G)
    return RowHashes(bits=bits, seed=config.seed)


@njit(cache=True)
def _psi(v, e):
    if e == 1:
        return v
    if e == 2:
        return v * v
    return (v * v) * (v * v)


@njit(cache=True)
def _column_signature(rows, vals, H, e):
    """Signed accumulator and thresholded signature of one column, one map.

    Accumulates in ascending row order; the order is load-bearing for the
    bitwise-exact incremental update.
    """
    G = H.shape[1]
    acc = np.zeros(G, dtype=np.float64)
    for k in range(len(rows)):
        psi = _psi(vals[k], e)
        i = rows[k]
        for t in range(G):
            if H[i, t] != 0:
                acc[t] += psi
            else:
                acc[t] -= psi
    sig = np.empty(G, dtype=np.uint8)
    for t in range(G):
        sig[t] = np.uint8(1) if acc[t] >= 0.0 else np.uint8(0)
    return acc, sig


def simlsh_signature(j: int, ratings: SparseRatings, H: np.ndarray,
                     psi_exponent: int = 1):
    """Encode column j against one M x G hash map.

    Returns (accumulator, signature): the G signed totals and their 0/1
    thresholding (nonnegative maps to 1, so an empty column is all ones).
    """
    rows, vals = ratings.col_slice(j)
    H = np.ascontiguousarray(H, dtype=np.uint8)
    return _column_signature(rows, vals, H, psi_exponent)


@njit(cache=True, parallel=True)
def _accumulate_all(col_ptr, col_rows, col_vals, bits, e):
    N = len(col_ptr) - 1
    q = bits.shape[1]
    p = bits.shape[2]
    G = bits.shape[3]
    acc = np.zeros((N, q, p, G), dtype=np.float64)
    for j in prange(N):
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
    return acc


def _threshold(acc: np.ndarray) -> np.ndarray:
    return (acc >= 0.0).astype(np.uint8)


@dataclass
class HashState:
    """Per-column signed accumulators and signatures for every (group, map).

    The accumulators are sufficient state: signatures are re-thresholded
    from them, and incremental updates add new contributions in place of a
    full recomputation.
    """

    acc: np.ndarray  # (N, q, p, G) float64
    sig: np.ndarray  # (N, q, p, G) uint8
    config: LshConfig

    @property
    def N(self) -> int:
        return self.acc.shape[0]

    def acc_map(self, g: int, m: int) -> np.ndarray:
        return self.acc[:, g, m, :]

    def sig_map(self, g: int, m: int) -> np.ndarray:
        return self.sig[:, g, m, :]

    def save(self, path) -> None:
        c = self.config
        with open(path, "wb") as fh:
            header = (f"{HASHSTATE_MAGIC} {HASHSTATE_VERSION} {self.N} {c.G} "
                      f"{c.p} {c.q} {c.psi_exponent} {c.seed}\n")
            fh.write(header.encode())
            blob = np.ascontiguousarray(self.acc.transpose(1, 2, 0, 3))
            fh.write(blob.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "HashState":
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            if len(header) != 8 or header[0] != HASHSTATE_MAGIC or header[1] != HASHSTATE_VERSION:
                raise ValueError(f"{path}: not a {HASHSTATE_MAGIC} {HASHSTATE_VERSION} file")
            N, G, p, q, e, seed = (int(x) for x in header[2:])
            blob = np.frombuffer(fh.read(), dtype="<f8")
        acc = blob.reshape(q, p, N, G).transpose(2, 0, 1, 3).copy()
        config = LshConfig(G=G, p=p, q=q, psi_exponent=e, seed=seed)
        return cls(acc=acc, sig=_threshold(acc), config=config)


def compute_hash_state(ratings: SparseRatings, config: LshConfig,
                       hashes: RowHashes | None = None) -> HashState:
    """Encode every column under all p*q maps."""
    config.validate()
    if hashes is None:
        hashes = assign_row_hashes(ratings.M, config)
    acc = _accumulate_all(ratings.col_ptr, ratings.col_rows, ratings.col_vals,
                          hashes.bits, config.psi_exponent)
    return HashState(acc=acc, sig=_threshold(acc), config=config)


# --------------------------------------------------------------------------
# Bucketing and frequency Top-K
# --------------------------------------------------------------------------

@njit(cache=True)
def _pack_group_keys(sig_group):
    """Concatenate the p G-bit signatures of one group into uint64 bucket keys."""
    N, p, G = sig_group.shape
    keys = np.zeros(N, dtype=np.uint64)
    for j in range(N):
        k = U64(0)
        shift = U64(0)
        for m in range(p):
            for t in range(G):
                if sig_group[j, m, t] != 0:
                    k |= U64(1) << shift
                shift += U64(1)
        keys[j] = k
    return keys


def _group_runs(keys: np.ndarray):
    """Sort bucket keys and locate each column's run of equal keys.

    Returns (order, run_start, run_end): order is the key-sorted column
    permutation; run_start[j]..run_end[j] spans column j's bucket in it.
    """
    N = len(keys)
    order = np.argsort(keys, kind="stable").astype(np.int64)
    sorted_keys = keys[order]
    boundary = np.empty(N + 1, dtype=bool)
    boundary[0] = True
    boundary[-1] = True
    if N > 1:
        boundary[1:N] = sorted_keys[1:] != sorted_keys[:-1]
    starts = np.flatnonzero(boundary[:-1])
    run_id = np.cumsum(boundary[:-1]) - 1
    ends = np.empty(len(starts), dtype=np.int64)
    ends[:-1] = starts[1:]
    if len(starts):
        ends[-1] = N
    run_start = np.empty(N, dtype=np.int64)
    run_end = np.empty(N, dtype=np.int64)
    run_start[order] = starts[run_id]
    run_end[order] = ends[run_id]
    return order, run_start, run_end


def coarse_candidates(signatures) -> list[np.ndarray]:
    """Bucket columns that agree on all p maps of one group.

    ``signatures`` is a sequence of p arrays of shape (N, G).  Returns, per
    column, the sorted array of other columns sharing its bucket key.
    """
    sig_group = np.stack([np.asarray(s, dtype=np.uint8) for s in signatures], axis=1)
    if sig_group.shape[1] * sig_group.shape[2] > 64:
        raise ValueError("p*G exceeds the 64-bit bucket key")
    keys = _pack_group_keys(sig_group)
    order, run_start, run_end = _group_runs(keys)
    out = []
    for j in range(len(keys)):
        mates = order[run_start[j]:run_end[j]]
        out.append(np.sort(mates[mates != j]).astype(np.int32))
    return out


@njit(cache=True)
def _fill_candidates(orders, run_start, run_end, offsets, j_base):
    """Gather bucket-mates per target column.

    ``orders`` spans the full column set (positions index into it);
    ``run_start``/``run_end``/``offsets`` cover only the target columns,
    whose global indices start at ``j_base``.
    """
    q = run_start.shape[0]
    n_cols = run_start.shape[1]
    cand = np.empty(offsets[n_cols], dtype=np.int32)
    fill = offsets[:n_cols].copy()
    for g in range(q):
        for jj in range(n_cols):
            j = j_base + jj
            for pos in range(run_start[g, jj], run_end[g, jj]):
                o = orders[g, pos]
                if o != j:
                    cand[fill[jj]] = np.int32(o)
                    fill[jj] += 1
    return cand


@njit(cache=True)
def _fine_topk_core(cand, offsets, n_cols, K, seed, j_base, N_total):
    """Frequency Top-K per column with seeded random supplement.

    Handles columns j_base .. j_base + n_cols - 1 of an N_total-column space.
    Candidates are ranked by (occurrence count desc, column index asc); if a
    column has fewer than K distinct candidates the remainder is drawn
    uniformly without replacement from the non-self columns.
    """
    entries = np.empty((n_cols, K), dtype=np.int32)
    best_cnt = np.empty(K, dtype=np.float64)
    best_idx = np.empty(K, dtype=np.int32)
    for jj in range(n_cols):
        j = j_base + jj
        lo, hi = offsets[jj], offsets[jj + 1]
        sl = np.sort(cand[lo:hi].copy())
        count = 0
        a = 0
        while a < len(sl):
            b = a
            while b < len(sl) and sl[b] == sl[a]:
                b += 1
            count = _topk_insert(best_cnt, best_idx, count, K, np.float64(b - a), sl[a])
            a = b
        if count < K:
            key = _splitmix64(_splitmix64(U64(seed) ^ U64(0xC0FFEE)) ^ U64(j))
            t = U64(0)
            while count < K:
                h = _splitmix64(key ^ t)
                t += U64(1)
                c = np.int32(h % U64(N_total))
                if c == j:
                    continue
                dup = False
                for x in range(count):
                    if best_idx[x] == c:
                        dup = True
                        break
                if not dup:
                    best_idx[count] = c
                    best_cnt[count] = 0.0
                    count += 1
        entries[jj, :] = best_idx[:K]
    return entries


def fine_topk(candidate_sets, K: int, N: int, seed: int) -> NeighborTable:
    """Select Top-K neighbors by occurrence frequency across the q groups.

    ``candidate_sets`` is a sequence of q per-group lists, each giving, per
    column, an array of bucket-mates from that group.
    """
    if K > N - 1:
        raise ValueError(f"K={K} exceeds N-1={N - 1}")
    counts = np.zeros(N + 1, dtype=np.int64)
    for group in candidate_sets:
        for j in range(N):
            counts[j + 1] += len(group[j])
    offsets = np.cumsum(counts)
    cand = np.empty(offsets[N], dtype=np.int32)
    fill = offsets[:N].copy()
    for group in candidate_sets:
        for j in range(N):
            k = len(group[j])
            cand[fill[j]:fill[j] + k] = group[j]
            fill[j] += k
    entries = _fine_topk_core(cand, offsets, N, K, seed, 0, N)
    return NeighborTable(N=N, K=K, entries=entries)


def _topk_from_group_keys(all_keys: np.ndarray, N: int, K: int, seed: int) -> NeighborTable:
    """Shared bucket-count-select path: all_keys is (q, N) uint64."""
    q = all_keys.shape[0]
    orders = np.empty((q, N), dtype=np.int64)
    run_start = np.empty((q, N), dtype=np.int64)
    run_end = np.empty((q, N), dtype=np.int64)
    for g in range(q):
        orders[g], run_start[g], run_end[g] = _group_runs(all_keys[g])
    counts = (run_end - run_start - 1).sum(axis=0)
    offsets = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    cand = _fill_candidates(orders, run_start, run_end, offsets, 0)
    entries = _fine_topk_core(cand, offsets, N, K, seed, 0, N)
    return NeighborTable(N=N, K=K, entries=entries)


def _state_group_keys(state: HashState) -> np.ndarray:
    N = state.N
    q = state.config.q
    keys = np.empty((q, N), dtype=np.uint64)
    for g in range(q):
        keys[g] = _pack_group_keys(state.sig[:, g, :, :])
    return keys


def simlsh_topk(ratings: SparseRatings, config: LshConfig, K: int):
    """Approximate Top-K neighbors for every column; linear in the data size.

    Returns (NeighborTable, HashState); the hash state is retained so the
    encoding can be updated incrementally when new data arrives.
    """
    config.validate()
    if K > ratings.N - 1:
        raise ValueError(f"K={K} exceeds N-1={ratings.N - 1}")
    state = compute_hash_state(ratings, config)
    keys = _state_group_keys(state)
    table = _topk_from_group_keys(keys, ratings.N, K, config.seed)
    return table, state


# --------------------------------------------------------------------------
# Baseline hash families
# --------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _minhash_kernel(col_ptr, col_rows, keys):
    N = len(col_ptr) - 1
    H = len(keys)
    sig = np.empty((N, H), dtype=np.uint64)
    for j in prange(N):
        for h in range(H):
            best = U64(0xFFFFFFFFFFFFFFFF)  # sentinel for empty columns
            for idx in range(col_ptr[j], col_ptr[j + 1]):
                v = _splitmix64(keys[h] ^ U64(col_rows[idx]))
                if v < best:
                    best = v
            sig[j, h] = best
    return sig


_U64_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64_py(x: int) -> int:
    z = (x + _GOLDEN) & _U64_MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64_MASK
    return (z ^ (z >> 31)) & _U64_MASK


def _hash_keys(seed: int, count: int, salt: int = 0) -> np.ndarray:
    """Fully mixed 64-bit keys, independent across seeds and positions."""
    base = _splitmix64_py(_splitmix64_py(seed) ^ salt)
    return np.array([_splitmix64_py((base + h * _GOLDEN) & _U64_MASK)
                     for h in range(count)], dtype=np.uint64)


def minhash_signatures(ratings: SparseRatings, num_hashes: int, seed: int) -> np.ndarray:
    """Min-wise signatures of each column's support set, (N, num_hashes).

    Each hash function ranks rows by a strong 64-bit mix; a 2-independent
    linear hash is visibly biased on the contiguous row ranges common here.
    """
    keys = _hash_keys(seed, num_hashes, salt=0x4A3C)
    return _minhash_kernel(ratings.col_ptr, ratings.col_rows, keys)


@njit(cache=True)
def _band_keys(sig, bands, rows_per_band):
    N = sig.shape[0]
    keys = np.empty((bands, N), dtype=np.uint64)
    for g in range(bands):
        for j in range(N):
            k = U64(0x243F6A8885A308D3)
            for r in range(rows_per_band):
                k = _splitmix64(k ^ U64(sig[j, g * rows_per_band + r]))
            keys[g, j] = k
    return keys


def minhash_topk(ratings: SparseRatings, num_hashes: int, bands: int,
                 K: int, seed: int) -> NeighborTable:
    """Banded min-wise hashing over column support sets, then frequency Top-K.

    Each band of num_hashes/bands signature rows forms one bucket key; bands
    play the role of the q groups in the selection rule.
    """
    if K > ratings.N - 1:
        raise ValueError(f"K={K} exceeds N-1={ratings.N - 1}")
    if num_hashes % bands != 0:
        raise ValueError("num_hashes must be a multiple of bands")
    sig = minhash_signatures(ratings, num_hashes, seed)
    keys = _band_keys(sig, bands, num_hashes // bands)
    return _topk_from_group_keys(keys, ratings.N, K, seed)


@njit(cache=True, parallel=True)
def _rp_bits_kernel(col_ptr, col_rows, col_vals, planes):
    N = len(col_ptr) - 1
    B = planes.shape[1]
    bits = np.empty((N, B), dtype=np.uint8)
    for j in prange(N):
        for t in range(B):
            s = 0.0
            for idx in range(col_ptr[j], col_ptr[j + 1]):
                s += col_vals[idx] * planes[col_rows[idx], t]
            bits[j, t] = np.uint8(1) if s >= 0.0 else np.uint8(0)
    return bits


def rp_signature_bits(ratings: SparseRatings, planes: np.ndarray) -> np.ndarray:
    """Sign bits of each column against the given (M, B) hyperplane normals."""
    return _rp_bits_kernel(ratings.col_ptr, ratings.col_rows, ratings.col_vals,
                           np.ascontiguousarray(planes, dtype=np.float64))


def rpcos_topk(ratings: SparseRatings, num_planes_per_map: int, p: int, q: int,
               K: int, seed: int) -> NeighborTable:
    """Random-hyperplane cosine hashing with the same p/q amplification."""
    if K > ratings.N - 1:
        raise ValueError(f"K={K} exceeds N-1={ratings.N - 1}")
    if p * num_planes_per_map > 64:
        raise ValueError("p * num_planes_per_map exceeds the 64-bit bucket key")
    N = ratings.N
    keys = np.empty((q, N), dtype=np.uint64)
    sig_group = np.empty((N, p, num_planes_per_map), dtype=np.uint8)
    for g in range(q):
        for m in range(p):
            rng = np.random.default_rng((seed, g, m))
            planes = rng.standard_normal((ratings.M, num_planes_per_map))
            sig_group[:, m, :] = rp_signature_bits(ratings, planes)
        keys[g] = _pack_group_keys(sig_group)
    return _topk_from_group_keys(keys, N, K, seed)
