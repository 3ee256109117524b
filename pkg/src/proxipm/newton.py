"""Assembly and solution of the regularized Newton systems.

Three pipelines share the per-iteration scaling machinery:

* ``direct``   - LDL' of the symmetrized augmented system
  [[H + rho I + T, A'], [A, -delta I]] refactorized every step, where T
  is the complementarity scaling scattered over the cone variables.

* ``gmres-ldl`` - the variable-replicated form is permuted so that the
  coupled system splits into an easily invertible 2x2-diagonal block
  and a Schur complement S = [[H + rho I + W, A'], [A, -delta I]] whose
  extra diagonal W is bounded inside (rho/(delta rho + 1), 1/delta)
  regardless of how extreme the complementarity scaling gets.  S is
  solved by GMRES preconditioned with a (possibly stale) LDL' of an
  earlier S.

* ``pcg-chol``  - for LP (or diagonal H) the S-system is reduced once
  more to normal-equation form delta I + A diag(u) A', solved by CG
  preconditioned with a stale Cholesky factorization.

Bounding the Schur diagonal is what makes stale factorizations usable:
the entrywise change of W between two scalings is damped by the
regularization, so the preconditioner only needs refreshing when the
Krylov effort says so.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import ldl
from .krylov import KrylovConfig, KrylovOutcome, gmres, pcg
from .model import QpModel, RegParams, SlackModel
from .precond import PreconditionerManager, ReusePolicy, krylov_tol

# wide enough that realistic complementarity ratios never hit it: a
# clamped entry decouples the factorized matrix from the step recovery
SCALING_CLIP = (1e-32, 1e32)


class UnsupportedReduction(ValueError):
    """The normal-equation reduction needs H = 0 or H diagonal."""


class BackendFailure(RuntimeError):
    """A Newton solve failed even after refreshing the preconditioner."""


class Step(NamedTuple):
    """Newton direction; dz/dy2 are None outside the replicated form."""

    dx: np.ndarray
    dy1: np.ndarray
    ds: np.ndarray
    dz: np.ndarray | None = None
    dy2: np.ndarray | None = None


def clamp_scaling(theta_inv: np.ndarray) -> np.ndarray:
    """Clip complementarity ratios to avoid overflow near convergence."""
    return np.clip(theta_inv, SCALING_CLIP[0], SCALING_CLIP[1])


def _vec(x) -> np.ndarray:
    return x.entries if hasattr(x, "entries") else np.asarray(x, dtype=float)


def schur_diag(theta_inv, rho: float, delta: float) -> np.ndarray:
    """Entries w_i = 1/(delta + 1/(theta_inv_i + rho)).

    Strictly inside (rho/(delta rho + 1), 1/delta) for theta_inv > 0 and
    increasing in theta_inv; the two limits are attained as the scaling
    goes to 0 and infinity.
    """
    t = _vec(theta_inv)
    return 1.0 / (delta + 1.0 / (t + rho))


def schur_diag_shift(theta_hat_inv, theta_inv, rho: float, delta: float):
    """Closed-form entrywise change of ``schur_diag`` between scalings.

    Equals schur_diag(theta_hat_inv) - schur_diag(theta_inv), but in a
    damped form whose denominator exceeds one: the change is strictly
    smaller in magnitude than the raw scaling change whenever they are
    nonzero, which is why a stale factorization of S keeps
    preconditioning well.
    """
    th = _vec(theta_hat_inv)
    t = _vec(theta_inv)
    a = t + rho
    b = th + rho
    den = 1.0 + delta * delta * a * b + delta * a + delta * b
    return (th - t) / den


def reduced_diag_shift(theta_hat_inv, theta_inv, rho: float, delta: float):
    """Entrywise change of the normal-equation weights u = 1/(rho + w)
    between two scalings (damped form)."""
    th = _vec(theta_hat_inv)
    t = _vec(theta_inv)
    wh = schur_diag(th, rho, delta)
    w = schur_diag(t, rho, delta)
    den = (rho * (delta + 1.0 / (th + rho)) + 1.0) * (rho * (delta + 1.0 / (t + rho)) + 1.0)
    return (th - t) / ((th + rho) * (t + rho) * den), wh, w


def classic_reduced_diag_shift(theta_hat_inv, theta_inv, rho: float):
    """Entrywise change of the un-damped normal-equation weights
    1/(rho + theta_inv)."""
    th = _vec(theta_hat_inv)
    t = _vec(theta_inv)
    return (th - t) / ((th + rho) * (t + rho))


# ---------------------------------------------------------------------------
# residual blocks (right-hand sides are the negated optimality maps)


def direct_residual_blocks(model: QpModel, it, anchor, reg: RegParams):
    """(xi_d, xi_p) for the plain formulation; complementarity handled
    separately by the caller."""
    H = model.H.to_scipy()
    A = model.A.to_scipy()
    xi_d = -(H @ it.x + model.g + reg.rho * (it.x - anchor.x) - A.T @ it.y1)
    xi_d[model.cone_mask] += it.s
    xi_p = model.b - A @ it.x - reg.delta * (it.y1 - anchor.y1)
    return xi_d, xi_p


def slack_residual_blocks(slack: SlackModel, it, anchor, reg: RegParams):
    """(xi_d1, xi_d2, xi_p1, xi_p2) for the variable-replicated form."""
    base = slack.base
    H = base.H.to_scipy()
    A = base.A.to_scipy()
    xi_d1 = -(H @ it.x + base.g + reg.rho * (it.x - anchor.x) - A.T @ it.y1 - it.y2)
    xi_d2 = -(reg.rho * (it.z - anchor.z) + it.y2 - it.s)
    xi_p1 = base.b - A @ it.x - reg.delta * (it.y1 - anchor.y1)
    xi_p2 = -(it.x - it.z + reg.delta * (it.y2 - anchor.y2))
    return xi_d1, xi_d2, xi_p1, xi_p2


# ---------------------------------------------------------------------------
# augmented (direct) system


class AugmentedSystem:
    """[[H + rho I + T, A'], [A, -delta I]] with in-place diagonal updates.

    The sparsity pattern is fixed at construction; successive scalings
    only rewrite the d leading diagonal entries, so the symbolic
    factorization work is done once per problem.
    """

    def __init__(self, model: QpModel, reg: RegParams):
        self.model = model
        self.reg = reg
        d, m = model.dim, model.n_rows
        H = model.H.to_scipy()
        A = model.A.to_scipy()
        K = sp.bmat([[H + reg.rho * sp.eye(d), A.T],
                     [A, -reg.delta * sp.eye(m)]], format="csc")
        K.sort_indices()
        self.matrix = K
        self.diag_pos = _diagonal_positions(K, d)
        self.base_diag = K.data[self.diag_pos].copy()
        self.signs = np.concatenate([np.ones(d), -np.ones(m)])

    def update(self, theta_dagger: np.ndarray) -> None:
        """Install the cone scaling (zero on free variables)."""
        self.matrix.data[self.diag_pos] = self.base_diag + theta_dagger


def _diagonal_positions(K: sp.csc_matrix, count: int) -> np.ndarray:
    pos = np.empty(count, dtype=np.int64)
    for j in range(count):
        lo, hi = K.indptr[j], K.indptr[j + 1]
        k = np.searchsorted(K.indices[lo:hi], j)
        if k == hi - lo or K.indices[lo + k] != j:
            raise ValueError(f"missing structural diagonal at column {j}")
        pos[j] = lo + k
    return pos


@dataclass
class AugSystem:
    """One-shot assembly of the augmented system (test/inspection surface).

    ``matrix @ [dx; -dy] = rhs``; ``rhs`` stacks the dual block (with the
    complementarity part folded in over the cone) and the primal block.
    """

    matrix: sp.csc_matrix
    rhs: np.ndarray
    xi_mu: np.ndarray


def assemble_aug(model: QpModel, it, anchor, reg: RegParams, sigma: float = 0.0) -> AugSystem:
    cone = model.cone_mask
    xc = it.x[cone]
    if xc.size and (xc.min() <= 0.0 or it.s.min() <= 0.0):
        raise ValueError("complementarity pair must be strictly positive")
    sys_ = AugmentedSystem(model, reg)
    theta_dagger = np.zeros(model.dim)
    theta_dagger[cone] = clamp_scaling(it.s / xc) if xc.size else 0.0
    sys_.update(theta_dagger)
    xi_d, xi_p = direct_residual_blocks(model, it, anchor, reg)
    xi_mu = sigma * it.mu * np.ones(xc.size) - xc * it.s
    rhs1 = xi_d.copy()
    rhs1[cone] += xi_mu / xc
    return AugSystem(matrix=sys_.matrix, rhs=np.concatenate([rhs1, xi_p]), xi_mu=xi_mu)


# ---------------------------------------------------------------------------
# replicated (slack) system


class SlackSystem:
    """Schur-complement machinery for the variable-replicated Newton system.

    Block order puts the replicated pair first, so eliminating it leaves
    S = [[H + rho I + W, A'], [A, -delta I]] with the bounded diagonal W.
    Only the d diagonal entries of S change between iterations.
    """

    def __init__(self, slack: SlackModel, reg: RegParams):
        self.slack = slack
        self.reg = reg
        base = slack.base
        d, m = base.dim, base.n_rows
        self.d, self.m = d, m
        H = base.H.to_scipy()
        A = base.A.to_scipy()
        S = sp.bmat([[H + reg.rho * sp.eye(d), A.T],
                     [A, -reg.delta * sp.eye(m)]], format="csc")
        S.sort_indices()
        self.schur = S
        self.diag_pos = _diagonal_positions(S, d)
        self.base_diag = S.data[self.diag_pos].copy()
        self.signs = np.concatenate([np.ones(d), -np.ones(m)])
        self.theta_inv = np.full(d, np.nan)
        self.w = np.full(d, np.nan)

    def update(self, theta_inv: np.ndarray) -> None:
        self.theta_inv = clamp_scaling(theta_inv)
        self.w = schur_diag(self.theta_inv, self.reg.rho, self.reg.delta)
        self.schur.data[self.diag_pos] = self.base_diag + self.w

    def n11_solve(self, u: np.ndarray, v: np.ndarray):
        """Closed-form solve of [[Tinv + rho, -I], [-I, -delta I]] [p; q] = [u; v]."""
        P = self.theta_inv + self.reg.rho
        q = -(u + P * v) / (self.reg.delta * P + 1.0)
        p = -v - self.reg.delta * q
        return p, q

    def reduce_rhs(self, xi_d1, u, v):
        """Right-hand side of the S-system after eliminating the first block."""
        _, q = self.n11_solve(u, v)
        return xi_d1 - q

    def recover(self, dx, u, v):
        """Back-substitute (dz, dy2) once (dx, dy1) is known."""
        p, q = self.n11_solve(u, v - dx)
        return p, -q

    def full_matrix(self) -> sp.csc_matrix:
        """The permuted symmetric 4-block matrix; for verification only."""
        d, m = self.d, self.m
        base = self.slack.base
        H = base.H.to_scipy()
        A = base.A.to_scipy()
        rho, delta = self.reg.rho, self.reg.delta
        I = sp.eye(d)
        return sp.bmat([
            [sp.diags(self.theta_inv) + rho * I, -I, None, None],
            [-I, -delta * I, I, None],
            [None, I, H + rho * I, A.T],
            [None, None, A, -delta * sp.eye(m)],
        ], format="csc")


def solve_slack_newton(system: SlackSystem, xi_d1, xi_d2z, xi_p1, xi_p2,
                       backend: str = "direct", handle=None,
                       cfg: KrylovConfig | None = None):
    """Solve the full replicated system via the two ancillary solves.

    ``xi_d2z`` must already contain the eliminated complementarity part
    (dual z-block plus Z^{-1} xi_mu).  Returns ((dx, dz, dy1, dy2),
    KrylovOutcome-or-None).  With ``backend='gmres-stale-ldl'`` the
    S-system is solved iteratively, preconditioned by ``handle``.
    """
    u, v = xi_d2z, xi_p2
    rhs = np.concatenate([system.reduce_rhs(xi_d1, u, v), xi_p1])
    outcome = None
    if backend == "direct":
        h = handle or ldl.factorize_qdef_stable(system.schur, system.reg.rho,
                                                signs=system.signs)
        sol = h.solve(rhs)
    elif backend == "gmres-stale-ldl":
        if handle is None:
            raise ValueError("stale-LDL backend needs a factorization handle")
        cfg = cfg or KrylovConfig(method="gmres", restart=100,
                                  max_iterations=100, tolerance=1e-10)
        S = system.schur
        outcome = gmres(lambda q: S @ q, handle.solve, rhs, cfg)
        sol = outcome.solution
    else:
        raise ValueError(f"unknown backend {backend!r}")
    d = system.d
    dx = sol[:d]
    dy1 = -sol[d:]
    dz, dy2 = system.recover(dx, u, v)
    return (dx, dz, dy1, dy2), outcome


# ---------------------------------------------------------------------------
# normal-equation reduction (LP / diagonal H)


@dataclass
class ReducedNormal:
    """delta I + A diag(u) A' stored SPD (the sign-flipped Schur
    complement of the S-system), plus the weights that generated it."""

    matrix: sp.csc_matrix
    u: np.ndarray
    h_diag: np.ndarray


def _require_diagonal_h(H: sp.csc_matrix) -> np.ndarray:
    off = H - sp.diags(H.diagonal())
    if off.nnz and np.abs(off.data).max() > 0.0:
        raise UnsupportedReduction("normal-equation reduction needs diagonal H")
    return np.asarray(H.diagonal())


def reduced_weights(h_diag, theta_inv, rho, delta):
    """u = 1/(h + rho + w): diagonal H folds into the primal shift."""
    w = schur_diag(theta_inv, rho, delta)
    return 1.0 / (h_diag + rho + w)


def assemble_reduced(system: SlackSystem) -> ReducedNormal:
    """Assemble the SPD normal-equation matrix at the current scaling."""
    base = system.slack.base
    h_diag = _require_diagonal_h(base.H.to_scipy())
    u = reduced_weights(h_diag, system.theta_inv, system.reg.rho, system.reg.delta)
    A = base.A.to_scipy()
    M = (A.multiply(u)) @ A.T + system.reg.delta * sp.eye(system.m)
    M = sp.csc_matrix((M + M.T) * 0.5)
    M.sort_indices()
    return ReducedNormal(matrix=M, u=u, h_diag=h_diag)


# ---------------------------------------------------------------------------
# spectral diagnostics (dense; small instances only)


@dataclass
class SpectralCheck:
    eigenvalues: np.ndarray
    n_unit: int
    interval: tuple[float, float]
    max_imag: float


def spectral_interval_check(H, A, theta_inv, theta_hat_inv, reg: RegParams,
                            max_dim: int = 400) -> SpectralCheck:
    """Eigenvalues of S(theta)^{-1} S(theta_hat) by a dense generalized
    eigensolver, with the predicted enclosing interval for the non-unit
    part of the spectrum.  Refuses instances beyond ``max_dim``."""
    Hd = H.to_dense() if hasattr(H, "to_dense") else np.asarray(H, dtype=float)
    Ad = A.to_dense() if hasattr(A, "to_dense") else np.asarray(A, dtype=float)
    m, d = Ad.shape
    if d + m > max_dim:
        raise ValueError(f"instance of size {d + m} too large for dense check")
    rho, delta = reg.rho, reg.delta
    t = _vec(theta_inv)
    th = _vec(theta_hat_inv)

    def s_mat(w):
        top = Hd + rho * np.eye(d) + np.diag(w)
        return np.block([[top, Ad.T], [Ad, -delta * np.eye(m)]])

    S = s_mat(schur_diag(t, rho, delta))
    S_hat = s_mat(schur_diag(th, rho, delta))
    eigs = scipy.linalg.eig(S_hat, S)[0]
    max_imag = float(np.abs(eigs.imag).max(initial=0.0))
    eigs_re = eigs.real
    n_unit = int(np.sum(np.abs(eigs - 1.0) <= 1e-8))
    shift = schur_diag_shift(th, t, rho, delta)
    h_quad = Hd + rho * np.eye(d) + (Ad.T @ Ad) / delta + np.diag(schur_diag(t, rho, delta))
    lam = scipy.linalg.eigvalsh(h_quad)
    interval = (1.0 + shift.min() / lam.max(), 1.0 + shift.max() / lam.min())
    return SpectralCheck(eigenvalues=eigs_re, n_unit=n_unit,
                         interval=interval, max_imag=max_imag)


# ---------------------------------------------------------------------------
# solver backends


class DirectBackend:
    """Factorize the augmented system afresh every IPM step."""

    name = "direct"
    slack_form = False

    def __init__(self, model: QpModel, reg: RegParams, options=None):
        self.model = model
        self.reg = reg
        self.system = AugmentedSystem(model, reg)
        self.handle = None
        self.factorizations = 0
        self.krylov_iterations = 0
        self.step_index = 0

    def begin_step(self, it) -> None:
        cone = self.model.cone_mask
        theta_dagger = np.zeros(self.model.dim)
        theta_dagger[cone] = clamp_scaling(it.s / it.x[cone])
        self.system.update(theta_dagger)
        self.handle = ldl.factorize_qdef_stable(
            self.system.matrix, self.reg.rho, signs=self.system.signs,
            theta=theta_dagger, built_at=self.step_index)
        self.factorizations += 1

    def solve_newton(self, it, xi_d, xi_p, xi_mu) -> Step:
        cone = self.model.cone_mask
        xc = it.x[cone]
        rhs1 = xi_d.copy()
        rhs1[cone] += xi_mu / xc
        sol = self.handle.solve(np.concatenate([rhs1, xi_p]))
        d = self.model.dim
        dx = sol[:d]
        dy1 = -sol[d:]
        ds = (xi_mu - it.s * dx[cone]) / xc
        return Step(dx=dx, dy1=dy1, ds=ds)

    def end_step(self) -> None:
        self.step_index += 1


class GmresLdlBackend:
    """Iterative S-system solves preconditioned by a stale LDL'."""

    name = "gmres-ldl"
    slack_form = True

    def __init__(self, slack: SlackModel, reg: RegParams, options=None):
        options = options or {}
        self.slack = slack
        self.reg = reg
        self.system = SlackSystem(slack, reg)
        budget = int(options.get("krylov_budget", 100))
        self.policy = ReusePolicy(mode="gmres", budget=budget,
                                  refresh_fraction=options.get("refresh_fraction", 0.51))
        self.manager = PreconditionerManager(self.policy, self._factor)
        self.krylov_iterations = 0
        self.step_index = 0
        self._mu = 1.0
        self._outcomes: list[KrylovOutcome] = []

    @property
    def factorizations(self) -> int:
        return self.manager.factorizations

    def _factor(self):
        return ldl.factorize_qdef_stable(
            self.system.schur, self.reg.rho, signs=self.system.signs,
            theta=self.system.w, built_at=self.step_index)

    def begin_step(self, it) -> None:
        self.system.update(it.s / it.z)
        self.manager.ensure()
        self._mu = it.mu
        self._outcomes = []

    def _solve_schur(self, rhs) -> KrylovOutcome:
        cfg = KrylovConfig(method="gmres", restart=self.policy.budget,
                           max_iterations=self.policy.budget,
                           tolerance=krylov_tol("gmres", self._mu, None))
        S = self.system.schur
        out = gmres(lambda q: S @ q, self.manager.handle.solve, rhs, cfg)
        if not out.converged:
            if self.manager.fresh_this_step:
                raise BackendFailure(
                    f"GMRES stalled at residual {out.residual_norm:.3e} "
                    f"with a fresh factorization")
            # refresh at the current scaling and retry this same solve once
            self.manager.refresh()
            self.krylov_iterations += out.iterations
            self._outcomes.append(out)
            out = gmres(lambda q: S @ q, self.manager.handle.solve, rhs, cfg)
            if not out.converged:
                raise BackendFailure(
                    f"GMRES stalled at residual {out.residual_norm:.3e} "
                    f"after a fresh factorization")
        return out

    def solve_newton(self, it, xi_d, xi_p, xi_mu) -> Step:
        d = self.system.d
        m = self.system.m
        u = xi_d[d:] + xi_mu / it.z
        v = xi_p[m:]
        rhs = np.concatenate([self.system.reduce_rhs(xi_d[:d], u, v), xi_p[:m]])
        out = self._solve_schur(rhs)
        self.krylov_iterations += out.iterations
        self._outcomes.append(out)
        dx = out.solution[:d]
        dy1 = -out.solution[d:]
        dz, dy2 = self.system.recover(dx, u, v)
        ds = (xi_mu - it.s * dz) / it.z
        return Step(dx=dx, dy1=dy1, ds=ds, dz=dz, dy2=dy2)

    def end_step(self) -> None:
        self.manager.note_step(self._outcomes)
        self.step_index += 1


class PcgCholBackend:
    """Normal-equation solves by CG preconditioned with a stale Cholesky."""

    name = "pcg-chol"
    slack_form = True

    def __init__(self, slack: SlackModel, reg: RegParams, options=None):
        options = options or {}
        self.slack = slack
        self.reg = reg
        self.system = SlackSystem(slack, reg)
        self.h_diag = _require_diagonal_h(slack.base.H.to_scipy())
        budget = int(options.get("krylov_budget", 200))
        self.policy = ReusePolicy(mode="pcg", budget=budget,
                                  refresh_fraction=options.get("refresh_fraction", 0.51))
        self.manager = PreconditionerManager(self.policy, self._factor)
        self.tolerance = krylov_tol("pcg", 1.0, options.get("tol", 1e-8))
        self.krylov_iterations = 0
        self.step_index = 0
        self._u = None
        self._outcomes: list[KrylovOutcome] = []

    @property
    def factorizations(self) -> int:
        return self.manager.factorizations

    def _factor(self):
        reduced = assemble_reduced(self.system)
        return ldl.factorize_spd(reduced.matrix, theta=reduced.u,
                                 built_at=self.step_index)

    def begin_step(self, it) -> None:
        self.system.update(it.s / it.z)
        self._u = reduced_weights(self.h_diag, self.system.theta_inv,
                                  self.reg.rho, self.reg.delta)
        self.manager.ensure()
        self._outcomes = []

    def _normal_apply(self, q):
        A = self.slack.base.A.to_scipy()
        return self.reg.delta * q + A @ (self._u * (A.T @ q))

    def _solve_normal(self, rhs) -> KrylovOutcome:
        cfg = KrylovConfig(method="pcg", max_iterations=self.policy.budget,
                           tolerance=self.tolerance)
        out = pcg(self._normal_apply, self.manager.handle.solve, rhs, cfg)
        if not out.converged:
            if self.manager.fresh_this_step:
                raise BackendFailure(
                    f"CG stalled at residual {out.residual_norm:.3e} "
                    f"with a fresh factorization")
            self.manager.refresh()
            self.krylov_iterations += out.iterations
            self._outcomes.append(out)
            out = pcg(self._normal_apply, self.manager.handle.solve, rhs, cfg)
            if not out.converged:
                raise BackendFailure(
                    f"CG stalled at residual {out.residual_norm:.3e} "
                    f"after a fresh factorization")
        return out

    def solve_newton(self, it, xi_d, xi_p, xi_mu) -> Step:
        d = self.system.d
        m = self.system.m
        A = self.slack.base.A.to_scipy()
        u_blk = xi_d[d:] + xi_mu / it.z
        v_blk = xi_p[m:]
        r1 = self.system.reduce_rhs(xi_d[:d], u_blk, v_blk)
        r2 = xi_p[:m]
        out = self._solve_normal(A @ (self._u * r1) - r2)
        self.krylov_iterations += out.iterations
        self._outcomes.append(out)
        q = out.solution                  # q = -dy1
        dy1 = -q
        dx = self._u * (r1 + A.T @ dy1)
        dz, dy2 = self.system.recover(dx, u_blk, v_blk)
        ds = (xi_mu - it.s * dz) / it.z
        return Step(dx=dx, dy1=dy1, ds=ds, dz=dz, dy2=dy2)

    def end_step(self) -> None:
        self.manager.note_step(self._outcomes)
        self.step_index += 1


def make_backend(mode: str, model, reg: RegParams, options=None):
    if mode == "direct":
        return DirectBackend(model, reg, options)
    if mode == "gmres-ldl":
        return GmresLdlBackend(model, reg, options)
    if mode == "pcg-chol":
        return PcgCholBackend(model, reg, options)
    raise ValueError(f"unknown mode {mode!r}")
