"""Compressed-column sparse kernels shared by the whole solver stack.

Matrices are stored in validated CSC form and are immutable after
construction, so model data can be shared freely between solver
instances.  Heavy products are delegated to scipy; this module owns the
invariants and the handful of operations the solver actually needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


@dataclass(frozen=True)
class SparseMat:
    """Immutable CSC matrix.

    Invariants enforced at construction: column pointers non-decreasing
    with ``indptr[-1] == nnz``, row indices strictly increasing within
    each column (which also rules out duplicate entries), finite values.
    """

    nrows: int
    ncols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        if indptr.shape != (self.ncols + 1,):
            raise DimensionError("indptr length must be ncols + 1")
        if indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise ValueError("column pointers must be non-decreasing from 0")
        if indptr[-1] != indices.shape[0] or indices.shape[0] != data.shape[0]:
            raise ValueError("last column pointer must equal stored entry count")
        if indices.size:
            if indices.min() < 0 or indices.max() >= self.nrows:
                raise ValueError("row index out of range")
            inside = np.ones(indices.size, dtype=bool)
            starts = indptr[1:-1]
            inside[starts[starts < indices.size]] = False  # first entry of a column is exempt
            if np.any((np.diff(indices) <= 0) & inside[1:]):
                raise ValueError("row indices must be strictly increasing per column")
        if not np.all(np.isfinite(data)):
            raise ValueError("matrix values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @classmethod
    def from_scipy(cls, mat) -> "SparseMat":
        m = sp.csc_matrix(mat)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, arr) -> "SparseMat":
        return cls.from_scipy(sp.csc_matrix(np.asarray(arr, dtype=float)))

    @classmethod
    def zeros(cls, nrows: int, ncols: int) -> "SparseMat":
        return cls(nrows, ncols, np.zeros(ncols + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def identity(cls, n: int) -> "SparseMat":
        return cls(n, n, np.arange(n + 1, dtype=np.int64),
                   np.arange(n, dtype=np.int64), np.ones(n))

    def to_scipy(self) -> sp.csc_matrix:
        m = sp.csc_matrix((self.data, self.indices, self.indptr),
                          shape=(self.nrows, self.ncols), copy=False)
        return m

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


@dataclass(frozen=True)
class DiagMat:
    """Diagonal matrix stored as its entry vector; entries must be finite."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", e)
        if not np.all(np.isfinite(e)):
            raise ValueError("diagonal entries must be finite")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def require_positive(self) -> "DiagMat":
        if self.entries.size and self.entries.min() <= 0.0:
            raise ValueError("diagonal entries must be strictly positive")
        return self


def _entries(w) -> np.ndarray:
    return w.entries if isinstance(w, DiagMat) else np.asarray(w, dtype=float)


def matvec(M: SparseMat, v: np.ndarray) -> np.ndarray:
    """Return ``M @ v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (M.ncols,):
        raise DimensionError(f"matvec: expected vector of length {M.ncols}, got {v.shape}")
    return M.to_scipy() @ v


def matvec_t(M: SparseMat, v: np.ndarray) -> np.ndarray:
    """Return ``M.T @ v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (M.nrows,):
        raise DimensionError(f"matvec_t: expected vector of length {M.nrows}, got {v.shape}")
    return M.to_scipy().T @ v


def inf_norm(M: SparseMat) -> float:
    """Max over rows of the sum of absolute values in that row."""
    if M.nnz == 0:
        return 0.0
    rows = np.abs(M.to_scipy()).sum(axis=1)
    return float(np.max(rows))


def ata_plus_diag(A: SparseMat, w, d) -> SparseMat:
    """Return ``A @ diag(w) @ A.T + diag(d)`` as a full symmetric matrix.

    ``w`` must be non-negative so the result is positive semi-definite
    (positive definite whenever ``d > 0``).  Both triangles are stored;
    the factorization kernels read the full pattern.
    """
    w = _entries(w)
    d = _entries(d)
    if w.shape != (A.ncols,):
        raise DimensionError("weight vector length must equal ncols(A)")
    if d.shape != (A.nrows,):
        raise DimensionError("shift vector length must equal nrows(A)")
    if w.size and w.min() < 0.0:
        raise ValueError("weights must be non-negative")
    Asp = A.to_scipy()
    M = (Asp.multiply(w)) @ Asp.T
    M = M + sp.diags(d, format="csc", shape=(A.nrows, A.nrows))
    M = sp.csc_matrix(M)
    # exact symmetry: averaging removes the roundoff skew of the product
    M = (M + M.T) * 0.5
    return SparseMat.from_scipy(M)
