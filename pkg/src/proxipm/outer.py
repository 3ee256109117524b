"""Proximal-point outer loop: anchor updates, inexactness control, and
global termination.

Each outer round warm-starts the interior point iteration from the
current anchor and runs it until the relaxed inexactness test accepts
the subproblem; the accepted point becomes the next anchor.  The
regularization stays fixed for the whole run.  Global convergence is
declared on scaled primal/dual residuals plus the duality measure, all
checked against one tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .inner import (InnerConfig, Iterate, StalledStep, duality_measure,
                    inner_residual, inner_stop, predictor_corrector_step,
                    start_point)
from .ldl import FactorizationError
from .model import QpModel, RegParams, SlackModel, compute_reg, to_slack
from .newton import BackendFailure, make_backend
from .sparse import SparseMat


def equilibrate(model: QpModel, passes: int = 2):
    """Geometric-mean row/column equilibration of the constraint matrix.

    Returns (scaled model, row_scale, col_scale) with A' = R A C,
    g' = C g, b' = R b, H' = C H C; the cone is preserved and the
    objective value is invariant (g'.x' = g.x), so reported objectives
    need no unscaling.  This balances the residual norms the stopping
    tests measure, which badly scaled problems need for the duality
    measure and the infeasibilities to converge in lockstep.
    """
    A = model.A.to_scipy().copy()
    m, d = A.shape
    R = np.ones(m)
    C = np.ones(d)
    B = abs(A).tocsr()
    for _ in range(passes):
        B = B.tocsr()
        for axis_csr, scale in ((B, R), (B.T.tocsr(), C)):
            n_axis = axis_csr.shape[0]
            upd = np.ones(n_axis)
            for i in range(n_axis):
                lo, hi = axis_csr.indptr[i], axis_csr.indptr[i + 1]
                if hi > lo:
                    vals = axis_csr.data[lo:hi]
                    upd[i] = 1.0 / np.sqrt(float(vals.max()) * float(vals.min()))
            scale *= upd
            B = sp.diags(R) @ abs(A) @ sp.diags(C)
    As = sp.csc_matrix(sp.diags(R) @ A @ sp.diags(C))
    Hs = sp.csc_matrix(sp.diags(C) @ model.H.to_scipy() @ sp.diags(C))
    scaled = QpModel(H=SparseMat.from_scipy(Hs), A=SparseMat.from_scipy(As),
                     g=C * model.g, b=R * model.b,
                     cone_mask=model.cone_mask.copy(), name=model.name,
                     transform=model.transform,
                     n_file_rows=model.n_file_rows, n_file_cols=model.n_file_cols,
                     diagnostics=model.diagnostics)
    return scaled, R, C


def outer_residual(it: Iterate, model) -> np.ndarray:
    """Natural residual of the original problem (projection form); its
    zero set is exactly the primal-dual solution set."""
    if isinstance(model, SlackModel):
        base = model.base
        H = base.H.to_scipy()
        A = base.A.to_scipy()
        r1 = H @ it.x + base.g - A.T @ it.y1 - it.y2
        r2 = it.z - np.maximum(it.z - it.y2, 0.0)
        r3 = A @ it.x - base.b
        r4 = it.x - it.z
        return np.concatenate([r1, r2, r3, r4])
    H = model.H.to_scipy()
    A = model.A.to_scipy()
    v = H @ it.x + model.g - A.T @ it.y1
    rx = v.copy()
    cone = model.cone_mask
    rx[cone] = it.x[cone] - np.maximum(it.x[cone] - v[cone], 0.0)
    ry = A @ it.x - model.b
    return np.concatenate([rx, ry])


def stop_residuals(it: Iterate, model) -> tuple[float, float, float]:
    """(relative dual, relative primal, duality measure) used by the
    empirical termination test."""
    if isinstance(model, SlackModel):
        base = model.base
        H = base.H.to_scipy()
        A = base.A.to_scipy()
        dual = np.concatenate([base.g + H @ it.x - A.T @ it.y1 - it.y2,
                               it.y2 - it.s])
        primal = np.concatenate([base.b - A @ it.x, it.x - it.z])
        gnorm = max(float(np.linalg.norm(base.g)), 1.0)
        bnorm = max(float(np.linalg.norm(base.b)), 1.0)
    else:
        H = model.H.to_scipy()
        A = model.A.to_scipy()
        dual = model.g + H @ it.x - A.T @ it.y1
        dual = dual.copy()
        dual[model.cone_mask] -= it.s
        primal = model.b - A @ it.x
        gnorm = max(float(np.linalg.norm(model.g)), 1.0)
        bnorm = max(float(np.linalg.norm(model.b)), 1.0)
    return (float(np.linalg.norm(dual)) / gnorm,
            float(np.linalg.norm(primal)) / bnorm,
            it.mu)


def global_stop(it: Iterate, model, tol: float) -> bool:
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    dual, primal, mu = stop_residuals(it, model)
    return dual <= tol and primal <= tol and mu <= tol


@dataclass
class OuterRecord:
    """Per-subproblem bookkeeping row."""

    inner_steps: int
    mu: float
    residual_norm: float          # natural residual at the accepted point
    krylov_iterations: int        # cumulative backend counter snapshot
    factorizations: int


@dataclass
class OuterState:
    anchor: Iterate
    reg: RegParams
    k: int = 0
    history: list = field(default_factory=list)
    mu_trace: list = field(default_factory=list)


@dataclass
class SolveOutcome:
    status: str                   # opt | max-it | failed
    objective: float
    iterate: Iterate
    state: OuterState
    mode: str
    tol: float
    reg: RegParams
    ppm_iterations: int
    ipm_iterations: int
    krylov_iterations: int
    factorizations: int
    wall_time: float
    residuals: tuple[float, float, float]
    failure: str | None = None

    @property
    def inner_per_outer(self) -> list[int]:
        return [rec.inner_steps for rec in self.state.history]


def _run_subproblem(state: OuterState, model, backend, tol, sigma_r,
                    inner_cfg: InnerConfig, exact_tol=None):
    """Run the inner iteration from the warm-started anchor until the
    subproblem is accepted, the global test fires, or limits hit."""
    it = start_point(model, state.reg, warm=state.anchor)
    steps = 0
    while True:
        if global_stop(it, model, tol):
            return it, steps, "opt"
        if steps > 0:
            if exact_tol is not None:
                rnorm = float(np.linalg.norm(inner_residual(it, model, state.anchor, state.reg)))
                if rnorm <= exact_tol:
                    return it, steps, "anchor"
            elif inner_stop(it, model, state.anchor, state.reg, state.k, sigma_r, tol):
                return it, steps, "anchor"
        if steps >= inner_cfg.max_iterations:
            return it, steps, "max-it"
        it, _ = predictor_corrector_step(it, model, state.anchor, state.reg,
                                         backend, inner_cfg)
        state.mu_trace.append(it.mu)
        steps += 1


def outer_iterate(state: OuterState, model, backend, tol, sigma_r=0.7,
                  inner_cfg: InnerConfig = InnerConfig(), exact_tol=None):
    """One outer round: solve the subproblem anchored at the current
    state, install the accepted point as the new anchor, append
    statistics.  Returns (iterate, status)."""
    it, steps, status = _run_subproblem(state, model, backend, tol, sigma_r,
                                        inner_cfg, exact_tol)
    rnorm = float(np.linalg.norm(inner_residual(it, model, state.anchor, state.reg)))
    state.history.append(OuterRecord(
        inner_steps=steps, mu=it.mu, residual_norm=rnorm,
        krylov_iterations=getattr(backend, "krylov_iterations", 0),
        factorizations=getattr(backend, "factorizations", 0)))
    if status == "anchor":
        state.anchor = it.copy()
        state.k += 1
    return it, status


def solve(model: QpModel, mode: str = "direct", tol: float = 1e-8,
          reg: RegParams | None = None, reg_scale: float = 1.0,
          sigma_r: float = 0.7, max_outer: int = 200,
          inner_cfg: InnerConfig = InnerConfig(),
          krylov_budget: int | None = None, refresh_fraction: float = 0.51,
          exact_subproblem_tol: float | None = None,
          scale: bool = True) -> SolveOutcome:
    """Solve a canonical-form problem end to end with one backend.

    ``mode`` selects the linear algebra: 'direct' refactorizes the
    augmented system each step; 'gmres-ldl' and 'pcg-chol' work on the
    variable-replicated form with stale preconditioners.  The
    regularization is sized on the unscaled problem; the iterations run
    on an equilibrated copy unless ``scale=False``.
    """
    if not (0.0 < sigma_r < 1.0):
        raise ValueError("sigma_r must lie in (0, 1)")
    if reg is None:
        reg = compute_reg(model, reg_scale)
    if scale:
        model, _, _ = equilibrate(model)
    work = to_slack(model) if mode != "direct" else model
    options = {"refresh_fraction": refresh_fraction, "tol": tol}
    if krylov_budget is not None:
        options["krylov_budget"] = krylov_budget
    backend = make_backend(mode, work, reg, options)

    t0 = time.perf_counter()
    failure = None
    status = "max-it"
    it = start_point(work, reg)
    state = OuterState(anchor=it.copy(), reg=reg)
    try:
        while state.k < max_outer:
            it, status = outer_iterate(state, work, backend, tol, sigma_r,
                                       inner_cfg, exact_subproblem_tol)
            if status != "anchor":
                break
        else:
            status = "max-it"
        if status == "anchor":   # outer budget exhausted right at an anchor
            status = "max-it"
    except (StalledStep, BackendFailure, FactorizationError) as exc:
        status = "failed"
        failure = str(exc)
    wall = time.perf_counter() - t0

    if isinstance(work, SlackModel):
        objective = work.objective(it.x)
    else:
        objective = work.objective(it.x)
    return SolveOutcome(
        status=status, objective=objective, iterate=it, state=state,
        mode=mode, tol=tol, reg=reg,
        ppm_iterations=len(state.history),
        ipm_iterations=sum(r.inner_steps for r in state.history),
        krylov_iterations=getattr(backend, "krylov_iterations", 0),
        factorizations=getattr(backend, "factorizations", 0),
        wall_time=wall, residuals=stop_residuals(it, work), failure=failure)
