"""Built-in miniature problems for tests and the benchmark harness."""

from __future__ import annotations

import numpy as np

from .model import QpModel
from .sparse import SparseMat

TINY_LP_MPS = b"""NAME TOY1
ROWS
 N  COST
 E  R1
COLUMNS
    X1 COST 1.0 R1 1.0
RHS
    RHS R1 1.0
ENDATA
"""


def tiny_lp() -> QpModel:
    """min x s.t. x = 1, x >= 0; optimum x* = 1, objective 1."""
    return QpModel(H=SparseMat.zeros(1, 1), A=SparseMat.from_dense([[1.0]]),
                   g=np.array([1.0]), b=np.array([1.0]),
                   cone_mask=np.array([True]), name="toy-1var",
                   n_file_rows=1, n_file_cols=1)


def tiny_free_qp() -> QpModel:
    """min x^2/2 + x s.t. x = 1 with a free variable: the regularized
    subproblem has an interior fixed point (no complementarity block)."""
    return QpModel(H=SparseMat.from_dense([[1.0]]), A=SparseMat.from_dense([[1.0]]),
                   g=np.array([1.0]), b=np.array([1.0]),
                   cone_mask=np.array([False]), name="toy-free-qp",
                   n_file_rows=1, n_file_cols=1)


def random_lp(d: int = 10, m: int = 4, seed: int = 0,
              density: float = 1.0) -> QpModel:
    """Feasible bounded LP: b = A x0 for a positive x0 and g > 0, so the
    optimum is finite and generically unique."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, d))
    if density < 1.0:
        A *= rng.random(size=(m, d)) < density
    x0 = rng.uniform(0.5, 2.0, size=d)
    g = rng.uniform(0.1, 2.0, size=d)
    return QpModel(H=SparseMat.zeros(d, d), A=SparseMat.from_dense(A),
                   g=g, b=A @ x0, cone_mask=np.ones(d, dtype=bool),
                   name=f"random-lp-{seed}", n_file_rows=m, n_file_cols=d)


def random_qp(d: int = 10, m: int = 4, seed: int = 0,
              h_rank: int | None = None, diagonal_h: bool = False) -> QpModel:
    """Feasible convex QP with PSD quadratic term."""
    rng = np.random.default_rng(seed)
    lp = random_lp(d, m, seed)
    if diagonal_h:
        H = np.diag(rng.uniform(0.1, 2.0, size=d))
    else:
        r = h_rank if h_rank is not None else max(d // 2, 1)
        L = rng.normal(size=(d, r))
        H = L @ L.T / r
    return QpModel(H=SparseMat.from_dense(H), A=lp.A, g=lp.g, b=lp.b,
                   cone_mask=lp.cone_mask, name=f"random-qp-{seed}",
                   n_file_rows=m, n_file_cols=d)
