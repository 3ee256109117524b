"""Infeasible predictor-corrector interior point iteration.

One instance of this loop solves one proximal subproblem: the anchor
point enters the residuals through the regularization terms, and the
subproblem is declared done by the inexactness test ``inner_stop``.
All three linear-algebra backends drive the same stepping logic; both
Newton solves of a step (predictor and corrector) reuse one
factorization or preconditioner.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import QpModel, RegParams, SlackModel
from .newton import direct_residual_blocks, slack_residual_blocks
from .sparse import ata_plus_diag
from . import ldl


class StalledStep(RuntimeError):
    """Fraction-to-boundary step length collapsed below 1e-10."""


@dataclass
class Iterate:
    """Current primal-dual point; z and y2 are used by the replicated
    form only.  The complementarity blocks stay strictly positive."""

    x: np.ndarray
    y1: np.ndarray
    s: np.ndarray
    z: np.ndarray | None = None
    y2: np.ndarray | None = None
    mu: float = np.nan

    @property
    def slack_form(self) -> bool:
        return self.z is not None

    def comp_primal(self, model) -> np.ndarray:
        """The primal side of the complementarity pair."""
        return self.z if self.slack_form else self.x[model.cone_mask]

    def copy(self) -> "Iterate":
        return Iterate(x=self.x.copy(), y1=self.y1.copy(), s=self.s.copy(),
                       z=None if self.z is None else self.z.copy(),
                       y2=None if self.y2 is None else self.y2.copy(),
                       mu=self.mu)


@dataclass(frozen=True)
class InnerConfig:
    boundary_fraction: float = 0.995   # fraction-to-boundary tau
    sigma_min: float = 1e-8
    sigma_max: float = 0.5
    max_iterations: int = 100

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max < 1.0):
            raise ValueError("need 0 < sigma_min < sigma_max < 1")
        if not (0.0 < self.boundary_fraction < 1.0):
            raise ValueError("boundary fraction must lie in (0, 1)")


def duality_measure(v: np.ndarray, s: np.ndarray) -> float:
    return float(v @ s) / max(v.size, 1)


def step_to_boundary(v: np.ndarray, dv: np.ndarray, tau: float = 1.0) -> float:
    """Largest step in [0, 1] keeping ``v + alpha dv`` a ``tau`` fraction
    away from zero (1.0 when nothing moves toward the boundary)."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, tau * float(np.min(-v[neg] / dv[neg])))


def _positive_pair(v: np.ndarray, s: np.ndarray):
    """Mehrotra-style shift of a complementarity pair into the interior."""
    dv = max(-1.5 * v.min(initial=0.0), 0.0)
    ds = max(-1.5 * s.min(initial=0.0), 0.0)
    vs = v + dv
    ss = s + ds
    dot = float(vs @ ss)
    if dot <= 0.0 or vs.sum() <= 0.0 or ss.sum() <= 0.0:
        return np.maximum(v, 1.0), np.maximum(s, 1.0)
    v0 = v + (dv + 0.5 * dot / ss.sum())
    s0 = s + (ds + 0.5 * dot / vs.sum())
    eps_v = 1e-8 * (1.0 + np.abs(v0).max(initial=0.0))
    eps_s = 1e-8 * (1.0 + np.abs(s0).max(initial=0.0))
    return np.maximum(v0, eps_v), np.maximum(s0, eps_s)


def _least_squares_point(base: QpModel, reg: RegParams):
    """Regularized least-squares primal/dual guess (the usual IPM cold
    start, with the dual regularization keeping rank-deficient rows
    harmless)."""
    A = base.A
    H = base.H.to_scipy()
    shift = max(reg.delta, 1e-10)
    handle = None
    for _ in range(4):
        try:
            M = ata_plus_diag(A, np.ones(base.dim), np.full(base.n_rows, shift))
            handle = ldl.factorize_spd(M)
            break
        except ldl.NonPositivePivot:
            shift *= 100.0
    if handle is None:
        raise RuntimeError("could not factorize the normal equations for the start point")
    Asp = A.to_scipy()
    x = Asp.T @ handle.solve(base.b)
    y = handle.solve(Asp @ (base.g + H @ x))
    s = base.g + H @ x - Asp.T @ y
    return x, y, s


def start_point(model, reg: RegParams, warm: Iterate | None = None,
                warm_mu: float | None = None) -> Iterate:
    """Cold start: shifted least-squares point.  Warm start: reuse the
    anchor, raising only complementarity entries that sit below the
    positivity floor 1e-4 * max(1, previous duality measure)."""
    if warm is not None:
        # pure reuse: lifting healthy entries would wreck the scaling
        # the stale preconditioners rely on, so the positivity floor
        # only repairs entries on or past the boundary
        mu_prev = warm.mu if warm_mu is None else warm_mu
        floor = 1e-4 * min(1.0, max(mu_prev, 1e-12))
        out = warm.copy()

        def lift(vec):
            bad = vec <= 0.0
            if np.any(bad):
                vec = vec.copy()
                vec[bad] = floor
            return vec

        if out.slack_form:
            out.z = lift(out.z)
        else:
            cone = model.cone_mask
            out.x = out.x.copy()
            out.x[cone] = lift(out.x[cone])
        out.s = lift(out.s)
        v = out.comp_primal(model if not isinstance(model, SlackModel) else model.base)
        out.mu = duality_measure(v, out.s)
        return out

    if isinstance(model, SlackModel):
        base = model.base
        x, y, s = _least_squares_point(base, reg)
        z, s0 = _positive_pair(x, s)
        return Iterate(x=x, y1=y, s=s0, z=z, y2=s0.copy(),
                       mu=duality_measure(z, s0))
    x, y, s = _least_squares_point(model, reg)
    cone = model.cone_mask
    xc, s0 = _positive_pair(x[cone], s[cone])
    x = x.copy()
    x[cone] = xc
    return Iterate(x=x, y1=y, s=s0, mu=duality_measure(xc, s0))


# ---------------------------------------------------------------------------
# residuals and subproblem termination


def inner_residual(it: Iterate, model, anchor: Iterate, reg: RegParams) -> np.ndarray:
    """Natural (projected) residual of the regularized subproblem.

    The projection is the identity on free and dual blocks and clips at
    zero on the cone block, so a zero residual is exactly a KKT point
    of the proximal subproblem anchored at ``anchor``.
    """
    if isinstance(model, SlackModel):
        base = model.base
        H = base.H.to_scipy()
        A = base.A.to_scipy()
        r1 = H @ it.x + base.g - A.T @ it.y1 - it.y2 + reg.rho * (it.x - anchor.x)
        v2 = reg.rho * (it.z - anchor.z) + it.y2
        r2 = it.z - np.maximum(it.z - v2, 0.0)
        r3 = A @ it.x - base.b + reg.delta * (it.y1 - anchor.y1)
        r4 = it.x - it.z + reg.delta * (it.y2 - anchor.y2)
        return np.concatenate([r1, r2, r3, r4])
    H = model.H.to_scipy()
    A = model.A.to_scipy()
    v = H @ it.x + model.g - A.T @ it.y1 + reg.rho * (it.x - anchor.x)
    rx = v.copy()
    cone = model.cone_mask
    rx[cone] = it.x[cone] - np.maximum(it.x[cone] - v[cone], 0.0)
    ry = A @ it.x - model.b + reg.delta * (it.y1 - anchor.y1)
    return np.concatenate([rx, ry])


def displacement(it: Iterate, anchor: Iterate) -> float:
    parts = [it.x - anchor.x, it.y1 - anchor.y1]
    if it.slack_form:
        parts += [it.z - anchor.z, it.y2 - anchor.y2]
    return float(np.sqrt(sum(float(p @ p) for p in parts)))


def inner_stop(it: Iterate, model, anchor: Iterate, reg: RegParams,
               k: int, sigma_r: float, tol: float = 0.0) -> bool:
    """Relaxed inexactness test for accepting a subproblem solution:
    ||r_k|| < 1e4 * sigma_r^k * min(1, displacement), with an absolute
    safety accept at 0.1 * tol (guards the vanishing-displacement case).
    """
    rnorm = float(np.linalg.norm(inner_residual(it, model, anchor, reg)))
    if rnorm == 0.0:
        return True
    if tol > 0.0 and rnorm <= 0.1 * tol:
        return True
    bound = 1e4 * sigma_r**k * min(1.0, displacement(it, anchor))
    return rnorm < bound


# ---------------------------------------------------------------------------
# predictor-corrector stepping


def predictor_corrector_step(it: Iterate, model, anchor: Iterate,
                             reg: RegParams, backend,
                             cfg: InnerConfig = InnerConfig()):
    """One Mehrotra step: affine predictor, cube-rule centering,
    second-order corrector, separate primal/dual step lengths."""
    slack_form = isinstance(model, SlackModel)
    base = model.base if slack_form else model
    v = it.comp_primal(base)
    mu = it.mu

    backend.begin_step(it)
    if slack_form:
        xi_d1, xi_d2, xi_p1, xi_p2 = slack_residual_blocks(model, it, anchor, reg)
        xi_d = np.concatenate([xi_d1, xi_d2])
        xi_p = np.concatenate([xi_p1, xi_p2])
    else:
        xi_d, xi_p = direct_residual_blocks(model, it, anchor, reg)

    aff = backend.solve_newton(it, xi_d, xi_p, -v * it.s)
    dv_aff = aff.dz if slack_form else aff.dx[base.cone_mask]
    if v.size:
        a_p_aff = step_to_boundary(v, dv_aff)
        a_d_aff = step_to_boundary(it.s, aff.ds)
        mu_aff = duality_measure(v + a_p_aff * dv_aff, it.s + a_d_aff * aff.ds)
        sigma = float(np.clip((mu_aff / mu) ** 3, cfg.sigma_min, cfg.sigma_max))
    else:
        mu_aff = 0.0   # no complementarity block: pure Newton step
        sigma = 0.0

    xi_mu = sigma * mu - v * it.s - dv_aff * aff.ds
    cor = backend.solve_newton(it, xi_d, xi_p, xi_mu)

    def advance(step):
        dv_ = step.dz if slack_form else step.dx[base.cone_mask]
        a_p = step_to_boundary(v, dv_, cfg.boundary_fraction)
        a_d = step_to_boundary(it.s, step.ds, cfg.boundary_fraction)
        new = Iterate(
            x=it.x + a_p * step.dx,
            y1=it.y1 + a_d * step.dy1,
            s=it.s + a_d * step.ds,
            z=None if step.dz is None else it.z + a_p * step.dz,
            y2=None if step.dy2 is None else it.y2 + a_d * step.dy2,
        )
        new.mu = duality_measure(new.comp_primal(base), new.s)
        return new, a_p, a_d

    new, a_p, a_d = advance(cor)
    used_fallback = False
    if v.size and new.mu > 1.01 * mu:
        # degenerate corrector: the second-order term overwhelmed the
        # linearization and complementarity grew; retry with a plain
        # centering direction, which keeps the barrier alive
        ctr = backend.solve_newton(it, xi_d, xi_p, cfg.sigma_max * mu - v * it.s)
        fb, fb_p, fb_d = advance(ctr)
        if fb.mu < new.mu:
            new, a_p, a_d = fb, fb_p, fb_d
            used_fallback = True
    backend.end_step()
    if max(a_p, a_d) < 1e-10:
        raise StalledStep(f"step lengths collapsed ({a_p:.2e}, {a_d:.2e})")
    info = {"sigma": sigma, "mu_aff": mu_aff, "alpha_primal": a_p,
            "alpha_dual": a_d, "corrector_fallback": used_fallback}
    return new, info
