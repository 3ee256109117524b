"""Stale-preconditioner lifecycle for the iterative backends.

A factorization built at one scaling keeps preconditioning later
systems because the regularization damps the diagonal drift.  It is
rebuilt only when the Krylov solver worked too hard: more than the
refresh fraction of the iteration budget in at least one of the two
predictor-corrector solves of a step, or outright non-convergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ReusePolicy:
    mode: str                      # "gmres" or "pcg"
    budget: int                    # Krylov iterations per solve
    refresh_fraction: float = 0.51

    def __post_init__(self):
        if not (0.0 < self.refresh_fraction <= 1.0):
            raise ValueError("refresh fraction must lie in (0, 1]")
        if self.budget < 1:
            raise ValueError("budget must be positive")

    @property
    def threshold(self) -> int:
        """Iteration count above which (strictly) a refresh is due."""
        return math.ceil(self.refresh_fraction * self.budget - 1e-9)


def krylov_tol(mode: str, mu: float, tol: float | None) -> float:
    """Absolute Krylov stopping tolerance per backend.

    GMRES tracks the duality measure (min(0.1, 0.8 mu)); CG uses a
    fixed fraction of the requested final accuracy (0.1 tol).
    """
    if mode == "gmres":
        if not mu > 0:
            raise ValueError("mu must be positive")
        return min(1e-1, 0.8 * mu)
    if mode == "pcg":
        if tol is None or not tol > 0:
            raise ValueError("tol must be positive")
        return 1e-1 * tol
    raise ValueError(f"unknown Krylov mode {mode!r}")


def after_ipm_step(outcomes, policy: ReusePolicy) -> str:
    """'refresh' when any solve of the step was too expensive or failed."""
    if not outcomes:
        return "keep"
    if any(not o.converged for o in outcomes):
        return "refresh"
    if max(o.iterations for o in outcomes) > policy.threshold:
        return "refresh"
    return "keep"


class PreconditionerManager:
    """Owns the active factorization handle for one solver instance.

    ``factor_fn`` must build a handle at the *current* scaling; the
    handle snapshots what it factorized, so staleness is explicit and
    later scaling updates never leak into it.
    """

    def __init__(self, policy: ReusePolicy, factor_fn):
        self.policy = policy
        self._factor = factor_fn
        self.handle = None
        self.factorizations = 0
        self._fresh_this_step = False

    @property
    def fresh_this_step(self) -> bool:
        return self._fresh_this_step

    def ensure(self):
        """First use always factorizes; afterwards the handle persists
        across steps (and across outer iterations) until refreshed."""
        if self.handle is None:
            self.refresh()
        return self.handle

    def refresh(self):
        self.handle = self._factor()
        self.factorizations += 1
        self._fresh_this_step = True
        return self.handle

    def note_step(self, outcomes) -> str:
        """Apply the effort rule at the end of an IPM step."""
        if self._fresh_this_step:
            self._fresh_this_step = False
            return "keep"
        decision = after_ipm_step(outcomes, self.policy)
        if decision == "refresh":
            self.refresh()
            self._fresh_this_step = False
        return decision
