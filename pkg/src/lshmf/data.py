"""Sparse rating data: parsing, dense indexing, splitting, baseline statistics.

Input files are line-oriented triplets ``<row-id><sep><col-id><sep><rating>``
with an optional trailing timestamp field that is ignored.  Row and column
ids are remapped to dense 0-based indices in order of first appearance; the
original ids are retained so results can be mapped back.

The serialized matrix format is a header line ``LSHMF-R v1 M N NNZ``
followed by one ``row col value`` triplet per line (dense indices).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

import numpy as np

DELIMITERS = ("::", "\t", ",", " ")

RATINGS_MAGIC = "LSHMF-R"
RATINGS_VERSION = "v1"


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class RatingTriplet(NamedTuple):
    row: int
    col: int
    value: float


@dataclass
class Triplets:
    """A batch of rating triplets in dense index space.

    ``row_ids``/``col_ids`` map dense index -> original id token; they may be
    ``None`` for data that never had external ids (synthetic or pre-indexed).
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_ids: list | None = None
    col_ids: list | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        for i, j, v in zip(self.rows, self.cols, self.values):
            yield RatingTriplet(int(i), int(j), float(v))

    @property
    def M(self) -> int:
        if self.row_ids is not None:
            return len(self.row_ids)
        return int(self.rows.max()) + 1 if len(self.rows) else 0

    @property
    def N(self) -> int:
        if self.col_ids is not None:
            return len(self.col_ids)
        return int(self.cols.max()) + 1 if len(self.cols) else 0


def _lines_of(stream) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def _sniff_delimiter(line: str) -> str:
    for sep in DELIMITERS:
        if sep in line:
            return sep
    return " "


def parse_ratings(stream, delimiter: str | None = None) -> Triplets:
    """Parse line-oriented rating triplets, remapping ids to dense indices.

    ``stream`` is a string or an iterable of lines.  ``delimiter`` is one of
    ``"::"``, tab, comma or single space; if ``None`` it is sniffed from the
    first data line.  A leading ``LSHMF-R`` header line is skipped so that
    serialized matrices re-parse cleanly.
    """
    return parse_ratings_extending(stream, [], [], delimiter=delimiter)


def parse_ratings_extending(stream, base_row_ids, base_col_ids,
                            delimiter: str | None = None) -> Triplets:
    """Parse triplets reusing existing id maps; unseen ids extend them.

    Used for increments: ids present in the base maps keep their dense
    indices, new ids are appended in first-appearance order.
    """
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    row_ids: list = list(base_row_ids)
    col_ids: list = list(base_col_ids)
    row_index: dict = {rid: i for i, rid in enumerate(row_ids)}
    col_index: dict = {cid: j for j, cid in enumerate(col_ids)}

    for lineno, raw in enumerate(_lines_of(stream), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if lineno == 1 and line.startswith(RATINGS_MAGIC):
            continue
        if delimiter is None:
            delimiter = _sniff_delimiter(line)
        fields = line.split(delimiter)
        if len(fields) not in (3, 4):
            raise ParseError(lineno, f"expected 3 or 4 fields, got {len(fields)}: {line!r}")
        rid, cid, rtok = fields[0], fields[1], fields[2]
        try:
            value = float(rtok)
        except ValueError:
            raise ParseError(lineno, f"bad rating {rtok!r}") from None
        if not math.isfinite(value):
            raise ParseError(lineno, f"non-finite rating {rtok!r}")
        if rid not in row_index:
            row_index[rid] = len(row_ids)
            row_ids.append(rid)
        if cid not in col_index:
            col_index[cid] = len(col_ids)
            col_ids.append(cid)
        rows.append(row_index[rid])
        cols.append(col_index[cid])
        vals.append(value)

    return Triplets(
        rows=np.asarray(rows, dtype=np.int32),
        cols=np.asarray(cols, dtype=np.int32),
        values=np.asarray(vals, dtype=np.float64),
        row_ids=row_ids,
        col_ids=col_ids,
    )


def transform_ratings(triplets: Triplets, zero_floor: float | None = None,
                      scale: float | None = None) -> Triplets:
    """Replace exact-zero values by ``zero_floor``, then divide by ``scale``.

    The inverse scale is applied at evaluation time, not here.
    """
    if scale is not None and scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    values = triplets.values.copy()
    if zero_floor is not None:
        values[values == 0.0] = zero_floor
    if scale is not None:
        values = values / scale
    return replace(triplets, values=values)


class SparseRatings:
    """Dual-indexed sparse interaction matrix, immutable after construction.

    Holds the triplets in input order plus row-major (CSR) and column-major
    (CSC) views.  All arrays are marked read-only; instances are safe for
    concurrent reads from any number of workers.
    """

    def __init__(self, M: int, N: int, rows: np.ndarray, cols: np.ndarray,
                 values: np.ndarray, row_ids: list | None = None,
                 col_ids: list | None = None):
        self.M = int(M)
        self.N = int(N)
        self.entry_rows = np.ascontiguousarray(rows, dtype=np.int32)
        self.entry_cols = np.ascontiguousarray(cols, dtype=np.int32)
        self.entry_values = np.ascontiguousarray(values, dtype=np.float64)
        self.row_ids = row_ids
        self.col_ids = col_ids

        nnz = len(self.entry_rows)
        if len(self.entry_cols) != nnz or len(self.entry_values) != nnz:
            raise ValueError("triplet arrays must have equal length")

        # CSR: entries sorted by (row, col)
        order = np.lexsort((self.entry_cols, self.entry_rows))
        self.row_ptr = np.zeros(self.M + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.entry_rows, minlength=self.M), out=self.row_ptr[1:])
        self.row_cols = self.entry_cols[order]
        self.row_vals = self.entry_values[order]

        # CSC: entries sorted by (col, row)
        order = np.lexsort((self.entry_rows, self.entry_cols))
        self.col_ptr = np.zeros(self.N + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.entry_cols, minlength=self.N), out=self.col_ptr[1:])
        self.col_rows = self.entry_rows[order]
        self.col_vals = self.entry_values[order]

        self._baselines = None
        for arr in (self.entry_rows, self.entry_cols, self.entry_values,
                    self.row_ptr, self.row_cols, self.row_vals,
                    self.col_ptr, self.col_rows, self.col_vals):
            arr.flags.writeable = False

    @property
    def nnz(self) -> int:
        return len(self.entry_rows)

    def triplets(self) -> Triplets:
        return Triplets(self.entry_rows, self.entry_cols, self.entry_values,
                        self.row_ids, self.col_ids)

    def row_slice(self, i: int):
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.row_cols[lo:hi], self.row_vals[lo:hi]

    def col_slice(self, j: int):
        lo, hi = self.col_ptr[j], self.col_ptr[j + 1]
        return self.col_rows[lo:hi], self.col_vals[lo:hi]

    def rating(self, i: int, j: int) -> float | None:
        """Value at (i, j), or None if absent."""
        cols, vals = self.row_slice(i)
        k = np.searchsorted(cols, j)
        if k < len(cols) and cols[k] == j:
            return float(vals[k])
        return None

    def baselines(self) -> "BaselineStats":
        if self._baselines is None:
            self._baselines = compute_baselines(self)
        return self._baselines

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{RATINGS_MAGIC} {RATINGS_VERSION} {self.M} {self.N} {self.nnz}\n")
            for i, j, v in zip(self.entry_rows, self.entry_cols, self.entry_values):
                fh.write(f"{i} {j} {float(v)!r}\n")

    @classmethod
    def load(cls, path) -> "SparseRatings":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 5 or header[0] != RATINGS_MAGIC or header[1] != RATINGS_VERSION:
                raise ValueError(f"{path}: not a {RATINGS_MAGIC} {RATINGS_VERSION} file")
            M, N, nnz = int(header[2]), int(header[3]), int(header[4])
            rows = np.empty(nnz, dtype=np.int32)
            cols = np.empty(nnz, dtype=np.int32)
            vals = np.empty(nnz, dtype=np.float64)
            for k in range(nnz):
                fields = fh.readline().split()
                rows[k], cols[k], vals[k] = int(fields[0]), int(fields[1]), float(fields[2])
        return build_indices(Triplets(rows, cols, vals), M=M, N=N)


@dataclass
class BaselineStats:
    """Global mean plus per-row and per-column deviations from it."""

    mu: float
    b: np.ndarray
    b_hat: np.ndarray


def build_indices(triplets: Triplets, M: int | None = None, N: int | None = None) -> SparseRatings:
    """Index triplets into a SparseRatings, rejecting duplicate (row, col) pairs."""
    rows, cols, vals = triplets.rows, triplets.cols, triplets.values
    M = triplets.M if M is None else M
    N = triplets.N if N is None else N
    if len(rows) and (rows.min() < 0 or rows.max() >= M):
        raise ValueError("row index out of range")
    if len(cols) and (cols.min() < 0 or cols.max() >= N):
        raise ValueError("column index out of range")
    if len(vals) and not np.all(np.isfinite(vals)):
        raise ValueError("non-finite rating value")
    if len(rows):
        order = np.lexsort((cols, rows))
        same = (np.diff(rows[order]) == 0) & (np.diff(cols[order]) == 0)
        if same.any():
            k = order[int(np.flatnonzero(same)[0])]
            raise ValueError(f"duplicate entry at (row={rows[k]}, col={cols[k]})")
    return SparseRatings(M, N, rows, cols, vals, triplets.row_ids, triplets.col_ids)


def compute_baselines(ratings: SparseRatings) -> BaselineStats:
    """Global mean and per-row / per-column mean deviations.

    Rows or columns with no known entries get deviation 0.
    """
    if ratings.nnz == 0:
        raise ValueError("cannot compute baselines of an empty matrix")
    mu = float(ratings.entry_values.mean())
    row_counts = np.diff(ratings.row_ptr)
    col_counts = np.diff(ratings.col_ptr)
    row_sums = np.zeros(ratings.M)
    np.add.at(row_sums, ratings.entry_rows, ratings.entry_values)
    col_sums = np.zeros(ratings.N)
    np.add.at(col_sums, ratings.entry_cols, ratings.entry_values)
    b = np.zeros(ratings.M)
    nz = row_counts > 0
    b[nz] = row_sums[nz] / row_counts[nz] - mu
    b_hat = np.zeros(ratings.N)
    nz = col_counts > 0
    b_hat[nz] = col_sums[nz] / col_counts[nz] - mu
    return BaselineStats(mu=mu, b=b, b_hat=b_hat)


def split_holdout(ratings: SparseRatings, test_fraction: float, seed: int):
    """Deterministic holdout split.

    Returns ``(train, test)`` where ``train`` is a SparseRatings over the same
    (M, N) index space and ``test`` is a Triplets.  Entries are moved to the
    test side only while their row and column keep at least one training
    entry, so the target size is met whenever the data allows it.
    """
    if not (0 <= test_fraction < 1):
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    nnz = ratings.nnz
    n_test = int(round(test_fraction * nnz))
    rng = np.random.default_rng(seed)
    in_test = np.zeros(nnz, dtype=bool)
    if n_test > 0:
        row_counts = np.bincount(ratings.entry_rows, minlength=ratings.M)
        col_counts = np.bincount(ratings.entry_cols, minlength=ratings.N)
        taken = 0
        for e in rng.permutation(nnz):
            if taken == n_test:
                break
            i = ratings.entry_rows[e]
            j = ratings.entry_cols[e]
            if row_counts[i] > 1 and col_counts[j] > 1:
                in_test[e] = True
                row_counts[i] -= 1
                col_counts[j] -= 1
                taken += 1
    keep = ~in_test
    train = SparseRatings(ratings.M, ratings.N,
                          ratings.entry_rows[keep], ratings.entry_cols[keep],
                          ratings.entry_values[keep], ratings.row_ids, ratings.col_ids)
    test = Triplets(ratings.entry_rows[in_test].copy(), ratings.entry_cols[in_test].copy(),
                    ratings.entry_values[in_test].copy(), ratings.row_ids, ratings.col_ids)
    return train, test
