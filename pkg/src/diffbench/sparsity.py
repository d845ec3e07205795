"""Sparse Jacobian container and seed-matrix compression.

A :class:`SeedMatrix` groups independent variables into columns; an AD
engine seeded with it returns ``J @ S``.  :func:`decompress` scatters that
compressed product back to the structural nonzeros of ``J``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffbench.errors import AssemblyError, CompressionError, DimensionError, ResourceError

# dense conversion refuses anything larger than this many entries
MAX_DENSE_ENTRIES = 50_000_000

N_POSE = 26


@dataclass
class SparseJacobian:
    """Triplet storage with a lazily built row-compressed view."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    layout: str = "generic"
    _csr: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.vals = np.asarray(self.vals, dtype=float)
        if not (self.rows.shape == self.cols.shape == self.vals.shape) or self.rows.ndim != 1:
            raise AssemblyError("rows, cols and vals must be 1-D and equally long")
        if self.nnz:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise AssemblyError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise AssemblyError("column index out of range")
            keys = np.sort(self.rows * self.n_cols + self.cols)
            if np.any(keys[1:] == keys[:-1]):
                raise AssemblyError("duplicate (row, col) entry")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def to_csr(self):
        """``(indptr, indices, data)`` with entries sorted by row, then column."""
        if self._csr is None:
            order = np.lexsort((self.cols, self.rows))
            counts = np.bincount(self.rows, minlength=self.n_rows)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._csr = (indptr, self.cols[order], self.vals[order])
        return self._csr

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows)

    def row(self, i: int):
        """``(cols, vals)`` of row ``i``."""
        indptr, indices, data = self.to_csr()
        return indices[indptr[i] : indptr[i + 1]], data[indptr[i] : indptr[i + 1]]

    def to_dense(self, max_entries: int = MAX_DENSE_ENTRIES) -> np.ndarray:
        if self.n_rows * self.n_cols > max_entries:
            raise ResourceError(f"{self.n_rows}x{self.n_cols} dense matrix exceeds {max_entries} entries")
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.vals
        return out

    @classmethod
    def from_dense(cls, a, layout: str = "generic") -> "SparseJacobian":
        a = np.asarray(a, dtype=float)
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], rows, cols, a[rows, cols], layout=layout)

    def write_matrix_market(self, path) -> None:
        """Coordinate MatrixMarket text, 1-based indices."""
        indptr, indices, data = self.to_csr()
        rows = np.repeat(np.arange(self.n_rows), np.diff(indptr))
        with open(path, "w") as fh:
            fh.write("%%MatrixMarket matrix coordinate real general\n")
            fh.write(f"% layout: {self.layout}\n")
            fh.write(f"{self.n_rows} {self.n_cols} {self.nnz}\n")
            for r, c, v in zip(rows, indices, data):
                fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")


@dataclass(frozen=True)
class SeedMatrix:
    """0/1 seed stored as one index list per column."""

    n_rows: int
    columns: tuple

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    def to_dense(self) -> np.ndarray:
        s = np.zeros((self.n_rows, self.n_cols))
        for j, idx in enumerate(self.columns):
            s[np.asarray(idx, dtype=int), j] = 1.0
        return s

    def group_of(self) -> np.ndarray:
        """Seed column of every variable (-1 if unseeded)."""
        g = np.full(self.n_rows, -1, dtype=np.int64)
        for j, idx in enumerate(self.columns):
            idx = np.asarray(idx, dtype=np.int64)
            if np.any(g[idx] != -1):
                raise CompressionError(f"seed column {j} reuses a variable already seeded")
            g[idx] = j
        return g


def identity_seed(n: int) -> SeedMatrix:
    return SeedMatrix(n, tuple(np.array([i]) for i in range(n)))


def build_ht_seed(n_corr: int) -> SeedMatrix:
    """Pose variables one per column; all ``u_{q,1}`` in column 26, all ``u_{q,2}`` in 27."""
    if n_corr < 1:
        raise DimensionError("need at least one correspondence")
    u = N_POSE + 2 * np.arange(n_corr)
    cols = tuple(np.array([i]) for i in range(N_POSE)) + (u, u + 1)
    return SeedMatrix(N_POSE + 2 * n_corr, cols)


def decompress(compressed, seed: SeedMatrix, pattern, layout: str = "generic") -> SparseJacobian:
    """Recover ``J`` from ``J @ seed`` given its structural nonzeros.

    ``pattern`` is ``(rows, cols)``.  Each entry is read from the compressed
    column its variable was seeded into; two entries of one row sharing a seed
    column make the compression invalid.
    """
    compressed = np.asarray(compressed, dtype=float)
    rows, cols = (np.asarray(p, dtype=np.int64) for p in pattern)
    if compressed.ndim != 2 or compressed.shape[1] != seed.n_cols:
        raise DimensionError(f"compressed shape {compressed.shape} does not match {seed.n_cols} seed columns")
    group = seed.group_of()[cols]
    if np.any(group < 0):
        raise CompressionError("pattern entry refers to an unseeded variable")
    keys = np.sort(rows * seed.n_cols + group)
    if np.any(keys[1:] == keys[:-1]):
        raise CompressionError("two structural nonzeros of one row share a seed column")
    return SparseJacobian(compressed.shape[0], seed.n_rows, rows, cols, compressed[rows, group], layout=layout)
