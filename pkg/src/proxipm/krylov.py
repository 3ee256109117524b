"""Restarted GMRES and preconditioned CG with exact iteration accounting.

Both methods take operator callables, stop on an absolute residual
2-norm, and report the number of operator applications performed in
the Krylov recurrence (setup residual computations excluded).  The
preconditioner-reuse policy consumes those counts, so they must be
exact; that bookkeeping is why these loops are written here instead of
delegating to library wrappers.

GMRES is right-preconditioned, so the monitored quantity is the true
residual norm.  Orthogonalization is modified Gram-Schmidt with a
second pass when cancellation signals loss of orthogonality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NegativeCurvatureError(RuntimeError):
    """CG met p'Mp <= 0: the assembled operator is not positive definite."""


@dataclass(frozen=True)
class KrylovConfig:
    method: str = "gmres"            # "gmres" or "pcg"
    restart: int = 100               # GMRES cycle length
    max_iterations: int = 100        # total operator-application budget
    tolerance: float = 1e-8          # absolute residual 2-norm
    side: str = "left"               # GMRES preconditioning side

    def __post_init__(self):
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")


@dataclass
class KrylovOutcome:
    solution: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    residual_history: list | None = None


def _identity(v):
    return v


def gmres(apply_op, apply_prec, rhs, cfg: KrylovConfig) -> KrylovOutcome:
    """Preconditioned restarted GMRES for ``op(x) = rhs`` from x0 = 0.

    With ``cfg.side == 'left'`` the monitored (and reported) residual is
    the preconditioned one, ``prec(rhs - op(x))``; with ``'right'`` it
    is the true residual.  The left test is what lets a stale
    factorization remain acceptable when the operator is extremely
    ill-scaled: the preconditioned residual tracks the error even when
    the attainable true residual is floored by conditioning.
    """
    if cfg.method != "gmres":
        raise ValueError("config method must be 'gmres'")
    prec = apply_prec or _identity
    left = cfg.side == "left"
    b = np.asarray(rhs, dtype=float)
    n = b.shape[0]
    x = np.zeros(n)
    r = np.asarray(prec(b), dtype=float) if left else b.copy()
    beta = float(np.linalg.norm(r))
    total = 0
    history = []
    if beta <= cfg.tolerance:
        return KrylovOutcome(x, 0, beta, True, history)

    while total < cfg.max_iterations:
        steps = min(cfg.restart, cfg.max_iterations - total)
        V = np.empty((n, steps + 1))
        Z = np.empty((n, steps)) if not left else None  # right: x = Z y
        Hc = np.zeros((steps + 1, steps))
        cs = np.empty(steps)
        sn = np.empty(steps)
        g = np.zeros(steps + 1)
        V[:, 0] = r / beta
        g[0] = beta
        k = 0
        breakdown = False
        for j in range(steps):
            if left:
                w = np.asarray(prec(apply_op(V[:, j])), dtype=float)
            else:
                z = prec(V[:, j])
                Z[:, j] = z
                w = np.asarray(apply_op(z), dtype=float)
            total += 1
            norm_before = float(np.linalg.norm(w))
            for i in range(j + 1):
                h = float(V[:, i] @ w)
                Hc[i, j] = h
                w -= h * V[:, i]
            norm_after = float(np.linalg.norm(w))
            if norm_after < 0.7071 * norm_before:
                # heavy cancellation: one reorthogonalization pass
                for i in range(j + 1):
                    h = float(V[:, i] @ w)
                    Hc[i, j] += h
                    w -= h * V[:, i]
                norm_after = float(np.linalg.norm(w))
            Hc[j + 1, j] = norm_after
            k = j + 1
            if norm_after <= 1e-14 * max(1.0, norm_before):
                breakdown = True
            else:
                V[:, j + 1] = w / norm_after
            # Givens update of the least-squares system
            for i in range(j):
                t = Hc[i, j]
                Hc[i, j] = cs[i] * t + sn[i] * Hc[i + 1, j]
                Hc[i + 1, j] = -sn[i] * t + cs[i] * Hc[i + 1, j]
            rnorm = float(np.hypot(Hc[j, j], Hc[j + 1, j]))
            if rnorm == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j] = Hc[j, j] / rnorm
                sn[j] = Hc[j + 1, j] / rnorm
            Hc[j, j] = rnorm
            Hc[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            history.append(abs(float(g[j + 1])))
            if abs(g[j + 1]) <= cfg.tolerance or breakdown:
                break
        # solution update for this cycle
        R = np.triu(Hc[:k, :k])
        try:
            y = np.linalg.solve(R, g[:k])
        except np.linalg.LinAlgError:
            y = np.linalg.lstsq(R, g[:k], rcond=None)[0]
        if left:
            x = x + V[:, :k] @ y
            r = b - np.asarray(apply_op(x), dtype=float)   # setup, not counted
            r = np.asarray(prec(r), dtype=float)
        else:
            x = x + Z[:, :k] @ y
            r = b - np.asarray(apply_op(x), dtype=float)   # setup, not counted
        beta = float(np.linalg.norm(r))
        if beta <= cfg.tolerance or breakdown:
            break
    return KrylovOutcome(x, total, beta, beta <= cfg.tolerance, history)


def pcg(apply_op, apply_prec, rhs, cfg: KrylovConfig) -> KrylovOutcome:
    """Preconditioned conjugate gradients for SPD ``op(x) = rhs``."""
    if cfg.method != "pcg":
        raise ValueError("config method must be 'pcg'")
    prec = apply_prec or _identity
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    rnorm = float(np.linalg.norm(r))
    history = []
    if rnorm <= cfg.tolerance:
        return KrylovOutcome(x, 0, rnorm, True, history)
    z = np.asarray(prec(r), dtype=float)
    p = z.copy()
    rz = float(r @ z)
    total = 0
    while total < cfg.max_iterations:
        q = np.asarray(apply_op(p), dtype=float)
        total += 1
        pq = float(p @ q)
        if pq <= 0.0:
            raise NegativeCurvatureError(
                f"p'Mp = {pq:.3e} <= 0 after {total} iterations")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if rnorm <= cfg.tolerance:
            return KrylovOutcome(x, total, rnorm, True, history)
        z = np.asarray(prec(r), dtype=float)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return KrylovOutcome(x, total, rnorm, False, history)
