"""Command-line front end and benchmark harness.

``proxipm run`` solves one problem file; ``proxipm suite`` runs a JSON
manifest of problems under one or more modes, writes a CSV of per-run
statistics, and emits Dolan-More performance-profile data (ratio,
cumulative fraction) per solver and metric for external plotting.
Failures become rows with status ``failed``, never crashes; the process
exit code is nonzero when any run did not reach ``opt``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

from .inner import InnerConfig
from .model import RegParams, parse_mps
from .outer import solve

CSV_COLUMNS = ["problem", "nnz_a", "nnz_h", "ppm_iters", "ipm_iters",
               "krylov_iters", "factorizations", "time_s", "objective",
               "reg", "status"]

PROFILE_METRICS = ("time_s", "ipm_iters")


@dataclass
class SolveReport:
    """One benchmark row; the column order of ``as_row`` is frozen."""

    problem: str
    nnz_a: int
    nnz_h: int
    ppm_iters: int
    ipm_iters: int
    krylov_iters: int
    factorizations: int
    time_s: float
    objective: float
    reg: float
    status: str

    def as_row(self) -> list[str]:
        return [self.problem, str(self.nnz_a), str(self.nnz_h),
                str(self.ppm_iters), str(self.ipm_iters),
                str(self.krylov_iters), str(self.factorizations),
                f"{self.time_s:.6f}",
                "nan" if math.isnan(self.objective) else f"{self.objective:.10g}",
                f"{self.reg:.6e}", self.status]


def _failed_report(name: str, reason: str) -> SolveReport:
    sys.stderr.write(f"proxipm: {name}: {reason}\n")
    return SolveReport(problem=name, nnz_a=0, nnz_h=0, ppm_iters=0,
                       ipm_iters=0, krylov_iters=0, factorizations=0,
                       time_s=0.0, objective=float("nan"), reg=0.0,
                       status="failed")


def run_problem(path, mode: str = "direct", tol: float = 1e-8,
                reg_scale: float = 1.0, reg_value: float | None = None,
                sigma_r: float = 0.7, max_ppm: int = 200, max_ipm: int = 100,
                krylov_budget: int | None = None,
                refresh_fraction: float = 0.51) -> SolveReport:
    """Parse and solve one problem file; any failure yields a failed row."""
    name = Path(path).name
    try:
        model = parse_mps(path)
        name = model.name or name
    except Exception as exc:
        return _failed_report(name, f"parse error: {exc}")
    try:
        reg = None if reg_value is None else RegParams(reg_value, reg_value)
        outcome = solve(model, mode=mode, tol=tol, reg=reg,
                        reg_scale=reg_scale, sigma_r=sigma_r,
                        max_outer=max_ppm,
                        inner_cfg=InnerConfig(max_iterations=max_ipm),
                        krylov_budget=krylov_budget,
                        refresh_fraction=refresh_fraction)
    except Exception as exc:
        return _failed_report(name, f"solve error: {exc}")
    if outcome.status == "failed":
        sys.stderr.write(f"proxipm: {name}: {outcome.failure}\n")
    return SolveReport(
        problem=name, nnz_a=model.A.nnz, nnz_h=model.H.nnz,
        ppm_iters=outcome.ppm_iterations, ipm_iters=outcome.ipm_iterations,
        krylov_iters=outcome.krylov_iterations,
        factorizations=outcome.factorizations, time_s=outcome.wall_time,
        objective=outcome.objective, reg=outcome.reg.rho,
        status=outcome.status)


def write_csv(reports, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        writer.writerow(rep.as_row())


def performance_profile(values_by_solver: dict) -> dict:
    """Dolan-More profile: per-problem ratios to the best solver, then
    the staircase of cumulative fractions per solver.

    ``values_by_solver`` maps solver -> list of per-problem costs
    (None/inf marks failure); all lists must be aligned by problem.
    """
    solvers = list(values_by_solver)
    n = len(next(iter(values_by_solver.values()), []))
    rows = {s: [] for s in solvers}
    for p in range(n):
        costs = {}
        for s in solvers:
            v = values_by_solver[s][p]
            costs[s] = math.inf if v is None or not math.isfinite(v) or v <= 0 else v
        best = min(costs.values())
        if not math.isfinite(best):
            continue
        for s in solvers:
            rows[s].append(costs[s] / best)
    profile = {}
    for s in solvers:
        ratios = sorted(r for r in rows[s] if math.isfinite(r))
        total = max(len(rows[s]), 1)
        profile[s] = [(r, (i + 1) / total) for i, r in enumerate(ratios)]
    return profile


def run_suite(manifest_path, modes, out_csv=None, profile_prefix=None,
              **flags):
    """Run every manifest entry under every mode; returns (reports,
    profiles, worst_rel_error).  Missing files become failed rows."""
    spec = json.loads(Path(manifest_path).read_text())
    entries = spec["problems"] if isinstance(spec, dict) else spec
    reports = []
    per_mode_metric = {m: {met: [] for met in PROFILE_METRICS} for m in modes}
    worst_rel = 0.0
    for entry in entries:
        if isinstance(entry, str):
            entry = {"path": entry}
        path = entry["path"]
        ref = entry.get("ref_objective")
        for mode in modes:
            if not Path(path).exists():
                rep = _failed_report(entry.get("name", Path(path).name),
                                     "file not found")
            else:
                rep = run_problem(path, mode=mode, **flags)
            rep.problem = f"{rep.problem}:{mode}" if len(modes) > 1 else rep.problem
            reports.append(rep)
            ok = rep.status == "opt"
            per_mode_metric[mode]["time_s"].append(rep.time_s if ok else None)
            per_mode_metric[mode]["ipm_iters"].append(rep.ipm_iters if ok else None)
            if ref is not None and ok:
                denom = max(abs(ref), 1.0)
                worst_rel = max(worst_rel, abs(rep.objective - ref) / denom)
    profiles = {}
    for met in PROFILE_METRICS:
        profiles[met] = performance_profile(
            {m: per_mode_metric[m][met] for m in modes})
    if out_csv is not None:
        with open(out_csv, "w") as fh:
            write_csv(reports, fh)
    if profile_prefix is not None:
        for met, prof in profiles.items():
            with open(f"{profile_prefix}.{met}.csv", "w") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["solver", "ratio", "cum_fraction"])
                for solver, stair in prof.items():
                    for ratio, frac in stair:
                        w.writerow([solver, f"{ratio:.6g}", f"{frac:.6g}"])
    return reports, profiles, worst_rel


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", default="direct",
                   choices=["direct", "gmres-ldl", "pcg-chol"])
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--reg-scale", type=float, default=1.0,
                   help="multiply the norm-based regularization by this factor")
    p.add_argument("--reg-value", type=float, default=None,
                   help="use this fixed regularization instead of the formula")
    p.add_argument("--sigma-r", type=float, default=0.7)
    p.add_argument("--max-ppm", type=int, default=200)
    p.add_argument("--max-ipm", type=int, default=100)
    p.add_argument("--krylov-budget", type=int, default=None)
    p.add_argument("--refresh-frac", type=float, default=0.51)
    p.add_argument("--seed", type=int, default=None,
                   help="reserved for randomized tie-breaking; the default "
                        "pipeline is fully deterministic")
    p.add_argument("--csv", default=None, help="write per-run rows here")


def _flag_kwargs(args) -> dict:
    return dict(tol=args.tol, reg_scale=args.reg_scale,
                reg_value=args.reg_value, sigma_r=args.sigma_r,
                max_ppm=args.max_ppm, max_ipm=args.max_ipm,
                krylov_budget=args.krylov_budget,
                refresh_fraction=args.refresh_frac)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="proxipm",
                                     description="Regularized interior point "
                                                 "LP/QP solver and benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve one MPS/QPS file")
    p_run.add_argument("path")
    _add_common_flags(p_run)

    p_suite = sub.add_parser("suite", help="run a JSON manifest of problems")
    p_suite.add_argument("manifest")
    p_suite.add_argument("--modes", default=None,
                         help="comma-separated mode list (defaults to --mode)")
    p_suite.add_argument("--profile-prefix", default=None,
                         help="write performance-profile CSVs with this prefix")
    _add_common_flags(p_suite)

    args = parser.parse_args(argv)

    if args.command == "run":
        rep = run_problem(args.path, mode=args.mode, **_flag_kwargs(args))
        out = io.StringIO()
        write_csv([rep], out)
        sys.stdout.write(out.getvalue())
        if args.csv:
            Path(args.csv).write_text(out.getvalue())
        return 0 if rep.status == "opt" else 1

    modes = (args.modes.split(",") if args.modes else [args.mode])
    reports, _, worst_rel = run_suite(
        args.manifest, modes, out_csv=args.csv,
        profile_prefix=args.profile_prefix, **_flag_kwargs(args))
    out = io.StringIO()
    write_csv(reports, out)
    sys.stdout.write(out.getvalue())
    if worst_rel:
        sys.stdout.write(f"# worst relative objective error vs references: "
                         f"{worst_rel:.3e}\n")
    return 0 if all(r.status == "opt" for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
