"""Convergence of the eps-flow to the slow-fast limit: three metrics and order fits."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT, Tolerances
from .fast import Heteroclinic, canonical_phase
from .flow import FlowError, Trajectory, exit_time, integrate_eps_flow
from .slow import PiecewiseEvolution, eval_u


class VerificationError(RuntimeError):
    pass


def default_eta(T: float) -> float:
    return 0.05 * T


def sup_error_off_jumps(traj: Trajectory, pe: PiecewiseEvolution, eta: float | None = None) -> float:
    """max |u_eps(t) - u(t)| over [0, T] minus the eta-neighbourhoods of the jump times."""
    T = pe.scenario.T
    eta = default_eta(T) if eta is None else eta
    jumps = np.array(pe.jump_times)
    if not eta > 0:
        raise ValueError("eta must be positive")
    if len(jumps) > 1 and eta >= 0.5 * np.diff(jumps).min():
        raise ValueError(f"eta={eta} overlaps neighbouring jump windows")
    grid = np.concatenate([traj.times] + [br.ts for br in pe.branches])
    grid = np.unique(grid[(grid >= 0) & (grid <= T)])
    grid = np.unique(np.concatenate([grid, 0.5 * (grid[1:] + grid[:-1])]))
    if len(jumps):
        keep = np.min(np.abs(grid[:, None] - jumps[None, :]), axis=1) >= eta
        grid = grid[keep]
    if len(grid) == 0:
        return 0.0
    ue = traj.at(grid)
    u = np.array([eval_u(pe, t) for t in grid])
    return float(np.linalg.norm(ue - u, axis=1).max())


@dataclass
class RescaledResult:
    t_eps: float | None
    sup_err: float
    window: tuple[float, float]  # part of the requested window actually inside [0, T]
    clipped: bool
    delta: float


def first_entry(traj: Trajectory, x, delta: float, t_from: float = 0.0) -> float | None:
    d = np.linalg.norm(traj.states - np.asarray(x, dtype=float), axis=1)
    idx = np.flatnonzero((traj.times >= t_from) & (d < delta))
    return float(traj.times[idx[0]]) if len(idx) else None


def rescaled_error(traj: Trajectory, het: Heteroclinic, window=(-5.0, 30.0), delta: float | None = None,
                   t_from: float = 0.0, tol: Tolerances = DEFAULT) -> RescaledResult:
    """sup over s in window of |u_eps(t_eps + eps s) - v(s)|, with both anchored to the same sphere."""
    s_lo, s_hi = map(float, window)
    if not s_hi > s_lo:
        raise ValueError("empty window")
    if delta is None:
        delta = het.delta_anchor
    if het.delta_anchor is None or abs(delta - het.delta_anchor) > 0:
        het = canonical_phase(het, delta)
    tau1 = first_entry(traj, het.xi, delta, t_from)
    if tau1 is None:
        return RescaledResult(None, math.inf, (s_lo, s_hi), False, delta)
    t_eps = exit_time(traj, het.xi, delta, tau1, tol)
    if t_eps is None:
        return RescaledResult(None, math.inf, (s_lo, s_hi), False, delta)
    T = traj.times[-1]
    eps = traj.eps
    s = s_lo + 0.01 * (s_hi - s_lo) * np.arange(101)
    t = t_eps + eps * s
    inside = (t >= 0) & (t <= T)
    clipped = not inside.all()
    s, t = s[inside], t[inside]
    err = np.linalg.norm(traj.at(t) - het(s), axis=1)
    return RescaledResult(float(t_eps), float(err.max()), (float(s[0]), float(s[-1])), clipped, float(delta))


def _segment_distances(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Min distance from each row of p to the segments [a_j, b_j]."""
    ab = b - a
    len2 = np.einsum("ij,ij->i", ab, ab)
    len2 = np.where(len2 > 0, len2, 1.0)
    out = np.full(len(p), np.inf)
    chunk = max(1, 2_000_000 // max(1, len(a) * p.shape[1]))
    for i in range(0, len(p), chunk):
        q = p[i : i + chunk]
        ap = q[:, None, :] - a[None, :, :]
        lam = np.clip(np.einsum("ijk,jk->ij", ap, ab) / len2, 0.0, 1.0)
        diff = ap - lam[:, :, None] * ab[None, :, :]
        out[i : i + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return out


def graph_distance(traj: Trajectory, pe: PiecewiseEvolution, time_weight: float = 1.0,
                   include_jumps: bool = True) -> float:
    """sup over the trajectory of the distance from (t, u_eps(t)) to the completed graph.

    With ``include_jumps=False`` the heteroclinic segments are dropped (diagnostic).
    """
    lines = pe.graph_polylines()
    if not include_jumps:
        lines = lines[: len(pe.branches)]
    w = np.ones(1 + pe.scenario.n)
    w[0] = time_weight
    a = np.vstack([ln[:-1] for ln in lines if len(ln) > 1]) * w
    b = np.vstack([ln[1:] for ln in lines if len(ln) > 1]) * w
    p = np.column_stack([traj.times, traj.states]) * w
    d = float(_segment_distances(p, a, b).max())
    # projection rounding below the coordinates' resolution is not a distance
    return 0.0 if d <= 4 * np.finfo(float).eps * max(1.0, float(np.abs(p).max())) else d


# ----------------------------------------------------------------- ladder


@dataclass
class ConvergenceReport:
    eps: float
    sup_err_off_jumps: float
    rescaled_err: list[float]
    graph_dist: float
    t_eps: list[float | None]
    jump_times: list[float]
    bound_violations: int
    notes: list[str] = field(default_factory=list)

    @property
    def rescaled_err_max(self) -> float:
        return max(self.rescaled_err) if self.rescaled_err else 0.0

    @property
    def t_eps_gaps(self) -> list[float]:
        return [abs(a - b) if a is not None else math.inf for a, b in zip(self.t_eps, self.jump_times)]


def verify_trajectory(traj: Trajectory, pe: PiecewiseEvolution, eta: float | None = None,
                      window=(-5.0, 30.0), tol: Tolerances = DEFAULT) -> ConvergenceReport:
    notes = []
    rescaled, t_eps = [], []
    t_from = 0.0
    for het in pe.heteroclinics:
        r = rescaled_error(traj, het, window, t_from=t_from, tol=tol)
        if r.t_eps is None:
            notes.append(f"no exit from B(x, {r.delta:.6g}) near the jump at t={het.tau:.12g}")
        if r.clipped:
            notes.append(f"rescaled window clipped to [{r.window[0]:.6g}, {r.window[1]:.6g}]")
        rescaled.append(r.sup_err)
        t_eps.append(r.t_eps)
        if r.t_eps is not None:
            t_from = r.t_eps
    return ConvergenceReport(
        eps=traj.eps,
        sup_err_off_jumps=sup_error_off_jumps(traj, pe, eta),
        rescaled_err=rescaled,
        graph_dist=graph_distance(traj, pe),
        t_eps=t_eps,
        jump_times=list(pe.jump_times),
        bound_violations=traj.bound_violations,
        notes=notes,
    )


@dataclass
class OrderFit:
    slope: float | None
    residual: float | None
    used: int
    note: str = ""


def convergence_order(eps, values) -> OrderFit:
    """Least-squares slope of log(value) against log(eps); zeros are excluded."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(eps) < 3:
        return OrderFit(None, None, len(eps), "insufficient rungs")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("errors must be finite and nonnegative")
    pos = values > 0
    if not pos.any():
        return OrderFit(None, None, 0, "exact")
    if pos.sum() < 2:
        return OrderFit(None, None, int(pos.sum()), "insufficient nonzero rungs")
    x, y = np.log(eps[pos]), np.log(values[pos])
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    residual = float(math.sqrt(res[0] / len(x))) if len(res) else 0.0
    note = "" if pos.all() else f"{int((~pos).sum())} exact rung(s) excluded"
    return OrderFit(float(coef[0]), residual, int(pos.sum()), note)


def ladder_orders(reports: list[ConvergenceReport]) -> dict[str, OrderFit]:
    eps = [r.eps for r in reports]
    out = {
        "sup_err_off_jumps": convergence_order(eps, [r.sup_err_off_jumps for r in reports]),
        "rescaled_err_max": convergence_order(eps, [r.rescaled_err_max for r in reports]),
        "graph_dist": convergence_order(eps, [r.graph_dist for r in reports]),
    }
    if reports and reports[0].jump_times and all(math.isfinite(g) for r in reports for g in r.t_eps_gaps):
        out["t_eps_gap"] = convergence_order(eps, [max(r.t_eps_gaps) for r in reports])
    return out


def run_ladder(scenario, pe: PiecewiseEvolution, eps_list=None, tol: Tolerances = DEFAULT,
               jobs: int = 1, perturb=None, eta: float | None = None, window=(-5.0, 30.0)):
    """Integrate and verify every rung; results come back in ladder order."""
    eps_list = list(scenario.eps_ladder if eps_list is None else eps_list)

    def one(eps):
        traj = integrate_eps_flow(scenario, eps, tol=tol, perturb=perturb)
        return traj, verify_trajectory(traj, pe, eta, window, tol)

    if jobs > 1 and len(eps_list) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, eps_list))
    else:
        results = [one(e) for e in eps_list]
    return [r[0] for r in results], [r[1] for r in results]


__all__ = [
    "ConvergenceReport",
    "FlowError",
    "OrderFit",
    "RescaledResult",
    "VerificationError",
    "convergence_order",
    "graph_distance",
    "ladder_orders",
    "rescaled_error",
    "run_ladder",
    "sup_error_off_jumps",
    "verify_trajectory",
]
