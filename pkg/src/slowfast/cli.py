"""Command-line front end: ``slowfast <subcommand> --scenario NAME_OR_FILE ...``.

Exit codes: 0 success, 1 assumption or verification failure, 2 usage or parse
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DEFAULT, Tolerances
from .critical import (
    AssumptionViolation,
    FoldError,
    SingularFoldError,
    check_fold_times,
    find_critical_points,
    fold_census,
    transversality,
)
from .energy import ScenarioError, Scenario, check_coercivity, load_scenario
from .expr import EvaluationError, ExpressionError
from .fast import FastDynamicsError, check_landing, heteroclinic_from_fold
from .flow import FlowError, exit_time, integrate_eps_flow, last_entry_time
from .slow import BranchError, PiecewiseEvolution, build_slow_fast_evolution
from .verify import first_entry, ladder_orders, run_ladder, verify_trajectory

log = logging.getLogger("slowfast")

EXIT_OK, EXIT_ASSUMPTION, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3
WATERMARK = "# UNVERIFIED-ASSUMPTIONS"


class UsageError(ValueError):
    pass


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    return format(float(v), ".17g")


def csv_text(header: list[str], rows, comments=(), watermark: bool = False) -> str:
    out = io.StringIO()
    if watermark:
        out.write(WATERMARK + "\n")
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(fmt(v) for v in row) + "\n")
    for c in comments:
        out.write(c + "\n")
    return out.getvalue()


# -------------------------------------------------------------- assumption report


@dataclass
class CheckLine:
    name: str
    passed: bool
    detail: str

    def __str__(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class AssumptionReport:
    scenario: str
    lines: list[CheckLine] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.lines)

    def add(self, name: str, passed: bool, detail: str) -> None:
        self.lines.append(CheckLine(name, bool(passed), detail))

    def text(self) -> str:
        head = f"scenario {self.scenario}"
        tail = f"verdict {'PASS' if self.passed else 'FAIL'}"
        return "\n".join([head] + [str(c) for c in self.lines] + [tail]) + "\n"


def assumption_report(scenario: Scenario, tol: Tolerances = DEFAULT, n_times: int = 101) -> AssumptionReport:
    rep = AssumptionReport(scenario.name)
    coe = check_coercivity(scenario)
    rep.add(
        "coercivity",
        coe.passed,
        f"min margin {fmt(coe.min_margin)} over {coe.samples} samples within radius {fmt(coe.radius)}"
        + (", polynomial-certified" if coe.polynomial_certified else ""),
    )
    ok, g, lam = scenario.y0_status()
    rep.add("initial-minimum", ok, f"|grad f(0,y0)| = {fmt(g)}, lambda_min = {fmt(lam)}")
    try:
        census = fold_census(scenario, n_times=n_times, tol=tol)
    except AssumptionViolation as err:
        rep.add("critical-ball", False, str(err))
        return rep
    rep.add("critical-ball", True, f"all critical points within radius {fmt(scenario.ball_radius)} (+slack)")
    folds = census.folds
    problems = check_fold_times(folds + census.singular, scenario.T, tol)
    rep.add("fold-times", not problems and not census.failures,
            "; ".join(problems + census.failures) or f"{len(folds) + len(census.singular)} fold(s), distinct times")
    for f in census.singular:
        which = "fold-b" if abs(f.b) < abs(f.c) else "fold-c"
        other = "fold-c" if which == "fold-b" else "fold-b"
        rep.add(which, False, f"t={fmt(f.t)} x={_vec(f.x)}: b={fmt(f.b)} c={fmt(f.c)} (singular fold system)")
        val = f.c if which == "fold-b" else f.b
        rep.add(other, abs(val) > tol.trans_tol, f"t={fmt(f.t)} {other[-1]}={fmt(val)}")
    for f in folds:
        tr = transversality(scenario, f, tol)
        where = f"t={fmt(f.t)} x={_vec(f.x)}"
        rep.add("fold-kernel", tr.eigen_gap > tol.degeneracy_tol, f"{where} eigen gap {fmt(tr.eigen_gap)}")
        rep.add("fold-b", abs(f.b) > tol.trans_tol, f"{where} b={fmt(f.b)}")
        rep.add("fold-c", abs(f.c) > tol.trans_tol, f"{where} c={fmt(f.c)} same_sign={fmt(f.same_sign)}")
        if tr.accepted and f.same_sign and tr.psd:
            try:
                het = heteroclinic_from_fold(scenario, f, tol)
            except FastDynamicsError as err:
                rep.add("landing-minimum", False, f"{where}: {err}")
                continue
            hp = check_landing(scenario, het, tol)
            rep.add("landing-minimum", hp.passed, f"{where} lands at {_vec(het.w_inf)} lambda_min={fmt(hp.lambda_min)}")
    if not folds and not census.singular:
        rep.add("folds", True, "no degenerate critical points on [0, T]")
    return rep


def _vec(x) -> str:
    return "(" + ", ".join(fmt(v) for v in np.atleast_1d(x)) + ")"


# -------------------------------------------------------------- subcommands


def _tolerances(pairs: list[str]) -> Tolerances:
    over = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        try:
            over[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--set {k}: {v!r} is not a number") from None
    try:
        return DEFAULT.replace(**over)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _floats(text: str | None, what: str) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None


@dataclass
class Context:
    args: argparse.Namespace
    scenario: Scenario
    tol: Tolerances
    out_dir: Path
    stdout: io.TextIOBase
    watermark: bool = False

    def emit(self, name: str | None, text: str) -> None:
        if name is None:
            self.stdout.write(text)
            return
        path = Path(name)
        if not path.is_absolute():
            path = self.out_dir / path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _gate(ctx: Context) -> int | None:
    """Assumption gate for the stages that need the limit evolution."""
    rep = assumption_report(ctx.scenario, ctx.tol)
    if rep.passed:
        return None
    if ctx.args.force:
        ctx.watermark = True
        log.warning("assumption check failed; continuing because of --force")
        return None
    sys.stderr.write(rep.text())
    return EXIT_ASSUMPTION


def _evolution(ctx: Context) -> PiecewiseEvolution:
    return build_slow_fast_evolution(ctx.scenario, ctx.tol)


def cmd_check(ctx: Context) -> int:
    rep = assumption_report(ctx.scenario, ctx.tol)
    ctx.emit(ctx.args.out, rep.text())
    return EXIT_OK if rep.passed else EXIT_ASSUMPTION


def cmd_critical(ctx: Context) -> int:
    t = ctx.args.t
    if not 0 <= t <= ctx.scenario.T:
        raise UsageError(f"--t {t} outside [0, {ctx.scenario.T}]")
    cps = find_critical_points(ctx.scenario, t, ctx.tol)
    n = ctx.scenario.n
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + ["lambda_min", "class"]
    rows = [[cp.t, *cp.x, cp.lambda_min, cp.kind] for cp in cps]
    ctx.emit(ctx.args.out, csv_text(header, rows))
    return EXIT_OK


def branch_csv(pe: PiecewiseEvolution, watermark: bool = False) -> str:
    n = pe.scenario.n
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + ["lambda_min", "branch_index", "event"]
    rows = []
    for br in pe.branches:
        for t, x, lam in zip(br.ts, br.xs, br.lams):
            rows.append([t, *x, lam, br.index + 1, ""])
        if br.fold is not None:
            f = br.fold
            rows.append([f.t, *f.x, 0.0, br.index + 1, "fold"])
    return csv_text(header, rows, watermark=watermark)


def het_csv(pe: PiecewiseEvolution, i: int, watermark: bool = False) -> str:
    het = pe.heteroclinics[i]
    e = pe.scenario.energy
    n = pe.scenario.n
    header = ["s"] + [f"x{k + 1}" for k in range(n)] + ["grad_norm", "f_value"]
    rows = []
    for s, v in zip(het.s, het.v):
        rows.append([s, *v, np.linalg.norm(e.gradient(het.tau, v)), e.value(het.tau, v)])
    comments = [
        f"# fold t={fmt(het.tau)} x={_vec(het.xi)}",
        f"# landing {_vec(het.w_inf)}",
        f"# phase s=0 at first exit from the sphere of radius {fmt(het.delta_anchor)}",
    ]
    return csv_text(header, rows, comments, watermark)


def traj_csv(traj, pe: PiecewiseEvolution | None, tol: Tolerances, watermark: bool = False) -> str:
    n = traj.states.shape[1]
    if pe is not None:
        t_from = 0.0
        for het in pe.heteroclinics:
            delta = het.delta_anchor
            tau = first_entry(traj, het.xi, delta, t_from)
            if tau is None:
                continue
            te = exit_time(traj, het.xi, delta, tau, tol)
            if te is None:
                continue
            try:
                last_entry_time(traj, het.xi, 0.5 * delta, te, tol)
            except FlowError:
                pass
            t_from = te
    header = ["t"] + [f"x{k + 1}" for k in range(n)] + ["deriv_norm", "step_size"]
    rows = [[t, *x, d, h] for t, x, d, h in zip(traj.times, traj.states, traj.deriv_norms, traj.step_sizes)]
    comments = [f"# event {kind} {fmt(t)}" for kind, t in traj.events]
    comments.append(f"# bound_violations {traj.bound_violations}")
    return csv_text(header, rows, comments, watermark)


def report_csv(reports, watermark: bool = False) -> str:
    k = max((len(r.t_eps) for r in reports), default=0)
    header = ["eps", "sup_err_off_jumps", "rescaled_err_max", "graph_dist"] + [f"t_eps_{i + 1}" for i in range(k)]
    rows = [[r.eps, r.sup_err_off_jumps, r.rescaled_err_max, r.graph_dist, *r.t_eps] for r in reports]
    orders = ladder_orders(reports)
    parts = []
    for name, fit in orders.items():
        if fit.slope is None:
            parts.append(f"{name}={fit.note}")
        else:
            parts.append(f"{name}={fmt(fit.slope)}")
    comments = [f"# note {n}" for r in reports for n in r.notes]
    comments.append("# orders " + " ".join(parts))
    return csv_text(header, rows, comments, watermark)


def cmd_slow(ctx: Context) -> int:
    code = _gate(ctx)
    if code is not None:
        return code
    pe = _evolution(ctx)
    ctx.emit(ctx.args.out, branch_csv(pe, ctx.watermark))
    return EXIT_OK


def cmd_fast(ctx: Context) -> int:
    code = _gate(ctx)
    if code is not None:
        return code
    pe = _evolution(ctx)
    i = ctx.args.fold_index
    if not 1 <= i <= len(pe.heteroclinics):
        raise UsageError(f"--fold-index {i}: the evolution has {len(pe.heteroclinics)} jump(s)")
    ctx.emit(ctx.args.out, het_csv(pe, i - 1, ctx.watermark))
    return EXIT_OK


def cmd_simulate(ctx: Context) -> int:
    perturb = _floats(ctx.args.perturb, "--perturb")
    if perturb is not None and len(perturb) != ctx.scenario.n:
        raise UsageError(f"--perturb needs {ctx.scenario.n} components")
    traj = integrate_eps_flow(ctx.scenario, ctx.args.eps, tol=ctx.tol, perturb=perturb)
    try:
        pe = _evolution(ctx)
    except (AssumptionViolation, FoldError, BranchError, FastDynamicsError, ScenarioError) as err:
        log.warning("no limit evolution, events skipped: %s", err)
        pe = None
    ctx.emit(ctx.args.out, traj_csv(traj, pe, ctx.tol, ctx.watermark))
    return EXIT_ASSUMPTION if traj.bound_violations else EXIT_OK


def _ladder(ctx: Context):
    eps = _floats(ctx.args.eps, "--eps") or list(ctx.scenario.eps_ladder)
    if any(not e > 0 for e in eps):
        raise UsageError("--eps values must be positive")
    perturb = _floats(getattr(ctx.args, "perturb", None), "--perturb")
    pe = _evolution(ctx)
    trajs, reports = run_ladder(ctx.scenario, pe, eps, ctx.tol, jobs=ctx.args.jobs, perturb=perturb)
    return pe, trajs, reports


def cmd_verify(ctx: Context) -> int:
    code = _gate(ctx)
    if code is not None:
        return code
    _, trajs, reports = _ladder(ctx)
    ctx.emit(ctx.args.out, report_csv(reports, ctx.watermark))
    return EXIT_ASSUMPTION if any(t.bound_violations for t in trajs) else EXIT_OK


def cmd_pipeline(ctx: Context) -> int:
    code = _gate(ctx)
    if code is not None:
        return code
    pe, trajs, reports = _ladder(ctx)
    w = ctx.watermark
    ctx.emit("branch.csv", branch_csv(pe, w))
    for i in range(len(pe.heteroclinics)):
        ctx.emit(f"het_{i + 1}.csv", het_csv(pe, i, w))
    for traj in trajs:
        ctx.emit(f"traj_eps_{traj.eps:g}.csv", traj_csv(traj, pe, ctx.tol, w))
    ctx.emit("report.csv", report_csv(reports, w))
    return EXIT_ASSUMPTION if any(t.bound_violations for t in trajs) else EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "critical": cmd_critical,
    "slow": cmd_slow,
    "fast": cmd_fast,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--scenario", required=True, help="scenario file, or the name of a built-in scenario")
    g.add_argument("--out-dir", default=".", help="directory for output files (default: current)")
    g.add_argument("--jobs", type=int, default=1, help="ladder rungs integrated concurrently (default 1)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a numerical tolerance, e.g. --set ode_tol=1e-9 (repeatable)")
    g.add_argument("--force", action="store_true",
                   help="run past failed assumption checks; outputs are watermarked " + WATERMARK)
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(
        prog="slowfast",
        description="Slow-fast limit of eps-gradient flows: equilibrium branches, jumps at folds, "
        "and convergence diagnostics.",
        epilog="Exit codes: 0 success, 1 assumption/verification failure, 2 usage or parse error, "
        "3 numerical failure.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        return sp

    sp = add("check", "check the standing assumptions and print PASS/FAIL per item")
    sp.add_argument("--out", help="write the report here instead of stdout")
    sp = add("critical", "list the critical points of f(t, .) at one time")
    sp.add_argument("--t", type=float, required=True, help="time")
    sp.add_argument("--out", help="CSV file (default stdout)")
    sp = add("slow", "equilibrium branches of the limit evolution")
    sp.add_argument("--out", help="CSV file (default stdout)")
    sp = add("fast", "heteroclinic jump issuing from one fold")
    sp.add_argument("--fold-index", type=int, default=1, help="1-based jump index (default 1)")
    sp.add_argument("--out", help="CSV file (default stdout)")
    sp = add("simulate", "integrate the eps-gradient flow")
    sp.add_argument("--eps", type=float, required=True, help="eps > 0")
    sp.add_argument("--perturb", help="initial perturbation d: start at y0 + eps*d (comma separated)")
    sp.add_argument("--out", help="CSV file (default stdout)")
    sp = add("verify", "convergence metrics over an eps ladder")
    sp.add_argument("--eps", help="comma-separated ladder (default: the scenario's)")
    sp.add_argument("--perturb", help="initial perturbation direction d (comma separated)")
    sp.add_argument("--out", help="CSV file (default stdout)")
    sp = add("pipeline", "check, build, simulate the ladder and verify; writes all CSVs to --out-dir")
    sp.add_argument("--eps", help="comma-separated ladder (default: the scenario's)")
    sp.add_argument("--perturb", help="initial perturbation direction d (comma separated)")
    return p


def main(argv=None, stdout=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    stdout = stdout if stdout is not None else sys.stdout
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        tol = _tolerances(args.set)
        scenario = load_scenario(args.scenario)
        ctx = Context(args, scenario, tol, Path(args.out_dir), stdout)
        return COMMANDS[args.command](ctx)
    except (UsageError, ScenarioError, ExpressionError, FileNotFoundError) as err:
        sys.stderr.write(f"slowfast: error: {err}\n")
        return EXIT_USAGE
    except AssumptionViolation as err:
        sys.stderr.write(f"slowfast: assumption violated: {err}\n")
        return EXIT_ASSUMPTION
    except (FoldError, BranchError, FlowError, FastDynamicsError, EvaluationError,
            FloatingPointError, np.linalg.LinAlgError) as err:
        sys.stderr.write(f"slowfast: numerical failure: {err}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
