"""Proximally stabilized interior point solver for convex LP/QP.

An inexact proximal-point outer loop repeatedly regularizes the problem
and hands each subproblem to an infeasible predictor-corrector interior
point method.  The regularization keeps every linear system
quasi-definite and bounds the Schur-complement diagonal of the
variable-replicated formulation, which lets the iterative backends
reuse one factorization as a preconditioner across many steps.
"""

from .inner import InnerConfig, Iterate, inner_residual, inner_stop, start_point
from .krylov import KrylovConfig, KrylovOutcome, gmres, pcg
from .ldl import FactorHandle, factorize_qdef, factorize_spd
from .model import (QpModel, RegParams, SlackModel, compute_reg, parse_mps,
                    to_slack, write_mps)
from .newton import schur_diag, schur_diag_shift, spectral_interval_check
from .outer import SolveOutcome, global_stop, outer_residual, solve
from .sparse import DiagMat, SparseMat, ata_plus_diag, inf_norm, matvec

__version__ = "0.1.0"

__all__ = [
    "DiagMat", "FactorHandle", "InnerConfig", "Iterate", "KrylovConfig",
    "KrylovOutcome", "QpModel", "RegParams", "SlackModel", "SolveOutcome",
    "ata_plus_diag", "compute_reg", "factorize_qdef", "factorize_spd",
    "global_stop", "gmres", "inf_norm", "inner_residual", "inner_stop",
    "matvec", "outer_residual", "parse_mps", "pcg", "schur_diag",
    "schur_diag_shift", "solve", "spectral_interval_check", "start_point",
    "to_slack", "write_mps",
]
