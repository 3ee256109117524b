"""Sparse LDL' factorization for regularized saddle systems.

The regularization added by the proximal scheme makes every factorized
matrix symmetric quasi-definite, so a static signed-diagonal LDL'
(no 2x2 pivots, no numerical pivoting) is valid for any symmetric
permutation.  That is what makes refactorization cheap and lets one
factorization serve as a preconditioner across many steps: the
permutation and the symbolic analysis depend on the sparsity pattern
only and are computed once per pattern.

Numerically dangerous pivots are clamped to a signed threshold and the
factorization is validated by a verification solve; a residual above
1e-6 * (1 + ||rhs||_inf) raises ``InstabilityDetected`` so the caller
can escalate the threshold (ten-fold, at most five times).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .sparse import SparseMat

VERIFY_TOL = 1e-6
SOLVE_TOL = 1e-8
MAX_ESCALATIONS = 5


class InstabilityDetected(RuntimeError):
    """Factorization failed its verification solve or hit a dead pivot."""


class NonPositivePivot(RuntimeError):
    """SPD factorization met a non-positive pivot: the assembled matrix
    is not positive definite, which signals an assembly bug upstream."""


class FactorizationError(RuntimeError):
    """Threshold escalation exhausted without a stable factorization."""


@njit(cache=True)
def _etree_counts(n, Ap, Ai, P, Pinv):
    parent = np.full(n, -1, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    flag = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        flag[j] = j
        col = P[j]
        for p in range(Ap[col], Ap[col + 1]):
            i = Pinv[Ai[p]]
            while i < j and flag[i] != j:
                if parent[i] == -1:
                    parent[i] = j
                lnz[i] += 1
                flag[i] = j
                i = parent[i]
    return parent, lnz


@njit(cache=True)
def _numeric(n, Ap, Ai, Ax, P, Pinv, parent, Lp, thresh, signs, spd):
    """Up-looking numeric factorization of P K P' = L D L'.

    ``signs`` (empty or length n, permuted order) gives the expected
    pivot signs; pivots off-sign or below ``thresh`` in magnitude are
    clamped to ``sign * thresh``.  Returns (status, nclamped, nflipped)
    with status 0 on success, j+1 when pivot j was irrecoverably zero,
    -(j+1) when SPD input had a non-positive pivot j.
    """
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz)
    D = np.empty(n)
    Y = np.zeros(n)
    pattern = np.empty(n, dtype=np.int64)
    flag = np.full(n, -1, dtype=np.int64)
    lnz_cur = np.zeros(n, dtype=np.int64)
    have_signs = signs.shape[0] == n
    nclamp = 0
    nflip = 0

    for j in range(n):
        top = n
        flag[j] = j
        Y[j] = 0.0
        col = P[j]
        for p in range(Ap[col], Ap[col + 1]):
            i = Pinv[Ai[p]]
            if i <= j:
                Y[i] += Ax[p]
                plen = 0
                while flag[i] != j:
                    pattern[plen] = i
                    plen += 1
                    flag[i] = j
                    i = parent[i]
                while plen > 0:
                    plen -= 1
                    top -= 1
                    pattern[top] = pattern[plen]
        d = Y[j]
        Y[j] = 0.0
        for t in range(top, n):
            i = pattern[t]
            yi = Y[i]
            Y[i] = 0.0
            p2 = Lp[i] + lnz_cur[i]
            for p in range(Lp[i], p2):
                Y[Li[p]] -= Lx[p] * yi
            lji = yi / D[i]
            d -= lji * yi
            Li[p2] = j
            Lx[p2] = lji
            lnz_cur[i] += 1

        if spd:
            if d <= 0.0:
                return Li, Lx, D, -(j + 1), nclamp, nflip
        elif have_signs:
            sgn = signs[j]
            if d * sgn <= 0.0:
                nflip += 1
                if thresh <= 0.0:
                    return Li, Lx, D, j + 1, nclamp, nflip
                d = sgn * thresh
                nclamp += 1
            elif abs(d) < thresh:
                d = sgn * thresh
                nclamp += 1
        else:
            if d == 0.0:
                return Li, Lx, D, j + 1, nclamp, nflip
            if abs(d) < thresh:
                d = thresh if d > 0.0 else -thresh
                nclamp += 1
        D[j] = d
    return Li, Lx, D, 0, nclamp, nflip


@njit(cache=True)
def _solve_kernel(n, Lp, Li, Lx, D, P, b):
    y = np.empty(n)
    for i in range(n):
        y[i] = b[P[i]]
    for j in range(n):
        yj = y[j]
        for p in range(Lp[j], Lp[j + 1]):
            y[Li[p]] -= Lx[p] * yj
    for j in range(n):
        y[j] /= D[j]
    for j in range(n - 1, -1, -1):
        acc = y[j]
        for p in range(Lp[j], Lp[j + 1]):
            acc -= Lx[p] * y[Li[p]]
        y[j] = acc
    x = np.empty(n)
    for i in range(n):
        x[P[i]] = y[i]
    return x


# symbolic analysis (permutation, elimination tree, column pointers) is a
# function of the sparsity pattern only; keep a small cache keyed on it
_SYMBOLIC_CACHE: dict = {}
_SYMBOLIC_CACHE_MAX = 16


def _pattern_key(K: sp.csc_matrix):
    return (K.shape[0], hash(K.indptr.tobytes()), hash(K.indices.tobytes()))


def fill_reducing_ordering(K: sp.csc_matrix) -> np.ndarray:
    """Symmetric fill-reducing permutation (minimum degree on the
    pattern, via SuperLU's analysis); identity when analysis fails."""
    n = K.shape[0]
    if n <= 2:
        return np.arange(n, dtype=np.int64)
    try:
        lu = sp.linalg.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A",
                            diag_pivot_thresh=0.0,
                            options=dict(SymmetricMode=True))
        pc = np.asarray(lu.perm_c, dtype=np.int64)
        # SuperLU's perm_c maps new->old for columns of A*Pc; our kernels
        # want P with (PKP')[i, j] = K[P[i], P[j]], which is its inverse
        perm = np.empty(n, dtype=np.int64)
        perm[pc] = np.arange(n, dtype=np.int64)
        return perm
    except Exception:
        return np.arange(n, dtype=np.int64)


def _symbolic(K: sp.csc_matrix):
    key = _pattern_key(K)
    hit = _SYMBOLIC_CACHE.get(key)
    if hit is not None:
        return hit
    n = K.shape[0]
    perm = fill_reducing_ordering(K)
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n, dtype=np.int64)
    parent, lnz = _etree_counts(n, K.indptr.astype(np.int64),
                                K.indices.astype(np.int64), perm, pinv)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lnz, out=Lp[1:])
    entry = (perm, pinv, parent, Lp)
    if len(_SYMBOLIC_CACHE) >= _SYMBOLIC_CACHE_MAX:
        _SYMBOLIC_CACHE.pop(next(iter(_SYMBOLIC_CACHE)))
    _SYMBOLIC_CACHE[key] = entry
    return entry


@dataclass
class FactorHandle:
    """Opaque factorization P K P' = L D L' plus the context it was
    built in.  Immutable after construction; concurrent solves are safe."""

    n: int
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    Dvec: np.ndarray
    perm: np.ndarray
    matrix: sp.csc_matrix           # retained for iterative refinement
    pivot_threshold: float
    theta: np.ndarray | None = None  # scaling snapshot the factors saw
    built_at: int = 0                # IPM iteration of construction
    n_clamped: int = 0
    n_sign_flipped: int = 0
    spd: bool = False

    def inertia(self) -> tuple[int, int]:
        return int(np.sum(self.Dvec > 0)), int(np.sum(self.Dvec < 0))

    @property
    def L(self) -> SparseMat:
        """Unit lower triangular factor (diagonal ones materialized)."""
        strict = sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.n, self.n))
        return SparseMat.from_scipy(strict + sp.eye(self.n, format="csc"))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve(self, rhs)


def _as_csc(K) -> sp.csc_matrix:
    # a private copy: handles must stay stale when the caller mutates
    # its matrix in place between factorizations
    if isinstance(K, SparseMat):
        M = K.to_scipy().copy()
    else:
        M = sp.csc_matrix(K, copy=True)
    M.sort_indices()
    return M


def _factorize(K, pivot_threshold, signs, spd, theta, built_at):
    Kc = _as_csc(K)
    n = Kc.shape[0]
    if Kc.shape[1] != n:
        raise ValueError("matrix must be square")
    perm, pinv, parent, Lp = _symbolic(Kc)
    signs_arr = np.zeros(0) if signs is None else np.asarray(signs, dtype=float)[perm]
    Li, Lx, D, status, nclamp, nflip = _numeric(
        n, Kc.indptr.astype(np.int64), Kc.indices.astype(np.int64), Kc.data,
        perm, pinv, parent, Lp, float(pivot_threshold), signs_arr, spd)
    if status < 0:
        raise NonPositivePivot(f"non-positive pivot at column {-status - 1}")
    if status > 0:
        raise InstabilityDetected(f"dead pivot at column {status - 1}")
    handle = FactorHandle(
        n=n, Lp=Lp, Li=Li, Lx=Lx, Dvec=D, perm=perm, matrix=Kc,
        pivot_threshold=float(pivot_threshold),
        theta=None if theta is None else np.array(theta, dtype=float, copy=True),
        built_at=built_at, n_clamped=nclamp, n_sign_flipped=nflip, spd=spd)
    _verify(handle)
    return handle


def _verify(handle: FactorHandle):
    rhs = handle.matrix @ np.ones(handle.n)
    x, res = _solve_refined(handle, rhs)
    if res > VERIFY_TOL * (1.0 + np.abs(rhs).max(initial=0.0)):
        raise InstabilityDetected(
            f"verification residual {res:.3e} exceeds tolerance "
            f"(threshold {handle.pivot_threshold:.1e}, "
            f"{handle.n_clamped} clamped pivots)")


def _solve_refined(handle: FactorHandle, rhs, max_refine=2):
    x = _solve_kernel(handle.n, handle.Lp, handle.Li, handle.Lx,
                      handle.Dvec, handle.perm, np.asarray(rhs, dtype=float))
    bound = SOLVE_TOL * (1.0 + np.abs(rhs).max(initial=0.0))
    res = np.inf
    for _ in range(max_refine + 1):
        r = rhs - handle.matrix @ x
        res = np.abs(r).max(initial=0.0)
        if res <= bound:
            break
        x = x + _solve_kernel(handle.n, handle.Lp, handle.Li, handle.Lx,
                              handle.Dvec, handle.perm, r)
    return x, res


def factorize_qdef(K, pivot_threshold: float, signs=None, theta=None,
                   built_at: int = 0) -> FactorHandle:
    """Factorize a symmetric quasi-definite matrix.

    ``signs`` optionally gives the expected pivot sign per unpermuted
    column (+1 for the regularized primal block, -1 for the dual block);
    pivots off-sign or smaller than ``pivot_threshold`` in magnitude are
    clamped, and the verification solve decides whether the result is
    usable.  Raises ``InstabilityDetected`` otherwise.
    """
    return _factorize(K, pivot_threshold, signs, False, theta, built_at)


def factorize_spd(K, theta=None, built_at: int = 0) -> FactorHandle:
    """Cholesky-type factorization (LDL' with all-positive D) of an SPD
    matrix; a non-positive pivot raises ``NonPositivePivot``."""
    return _factorize(K, 0.0, None, True, theta, built_at)


def factorize_qdef_stable(K, pivot_threshold: float, signs=None, theta=None,
                          built_at: int = 0) -> FactorHandle:
    """factorize_qdef with ten-fold threshold escalation on instability;
    gives up after ``MAX_ESCALATIONS`` escalations."""
    thr = float(pivot_threshold)
    last = None
    for _ in range(MAX_ESCALATIONS + 1):
        try:
            return factorize_qdef(K, thr, signs=signs, theta=theta, built_at=built_at)
        except InstabilityDetected as exc:
            last = exc
            thr *= 10.0
    raise FactorizationError(
        f"no stable factorization up to threshold {thr / 10.0:.1e}") from last


def solve(handle: FactorHandle, rhs: np.ndarray) -> np.ndarray:
    """Solve K x = rhs with the factors, refining iteratively while the
    residual exceeds 1e-8 * (1 + ||rhs||_inf) (at most two steps)."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (handle.n,):
        raise ValueError(f"rhs must have length {handle.n}")
    x, _ = _solve_refined(handle, rhs)
    return x
