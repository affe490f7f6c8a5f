"""Slow dynamics: equilibrium branches grad_x f(t, u(t)) = 0 and their assembly
into the piecewise limit evolution with heteroclinic jumps at folds."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT, Tolerances
from .critical import (
    AssumptionViolation,
    FoldPoint,
    _scale,
    refine_fold,
    transversality,
)
from .energy import Scenario, ScenarioError, _sphere_directions
from .fast import Heteroclinic, check_landing, heteroclinic_from_fold, sample_curve
from .linalg import jacobi_eigh


class BranchError(RuntimeError):
    pass


KAPPA = 0.1  # relative change of the tracked eigenvalue allowed per step
MAX_BRANCHES = 64


@dataclass
class Branch:
    ts: np.ndarray
    xs: np.ndarray  # (m, n)
    lams: np.ndarray  # tracked eigenvalue (smallest in modulus)
    dxs: np.ndarray  # du/dt at the samples
    t_start: float
    t_end: float
    end_reason: str  # "reached_T" | "fold"
    fold: FoldPoint | None
    index: int
    kind: str  # "stable" | "sibling"
    scenario: Scenario = field(repr=False)
    tol: Tolerances = field(default=DEFAULT, repr=False)

    def _raw(self, t: float) -> np.ndarray:
        ts = self.ts
        if self.fold is not None and t > ts[-1]:
            # the gap between the last sample and the fold follows the square-root law
            w = math.sqrt(max(self.fold.t - t, 0.0) / (self.fold.t - ts[-1]))
            return self.fold.x + (self.xs[-1] - self.fold.x) * w
        if t <= ts[0]:
            return self.xs[0].copy()
        if t >= ts[-1]:
            return self.xs[-1].copy()
        k = bisect.bisect_right(ts, t) - 1
        h = ts[k + 1] - ts[k]
        s = (t - ts[k]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * self.xs[k] + h10 * h * self.dxs[k] + h01 * self.xs[k + 1] + h11 * h * self.dxs[k + 1]

    def evaluate(self, t: float) -> np.ndarray:
        """Hermite (or square-root near the fold) interpolant, polished by Newton."""
        slack = 1e-12 * max(1.0, abs(self.t_end))
        if not self.t_start - slack <= t <= self.t_end + slack:
            raise ValueError(f"t={t} outside branch interval [{self.t_start}, {self.t_end}]")
        if self.fold is not None and t >= self.fold.t:
            return self.fold.x.copy()
        x0 = self._raw(t)
        return _polish(self.scenario, t, x0, self.tol.branch_tol)

    @property
    def lambda_min(self) -> np.ndarray:
        return self.lams


def _polish(scenario: Scenario, t: float, x0: np.ndarray, tol: float, max_iter: int = 8) -> np.ndarray:
    e = scenario.energy
    x = x0.copy()
    for _ in range(max_iter):
        g = e.gradient(t, x)
        h = e.hessian(t, x)
        if np.linalg.norm(g) <= 1e-3 * tol * _scale(h):
            break
        try:
            dx = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        x = x - dx
        if np.linalg.norm(dx) <= 1e-15 * (1 + np.linalg.norm(x)):
            break
    # never let the polish wander to a different branch
    if np.linalg.norm(x - x0) > 1e-3 * (1 + np.linalg.norm(x0)) or not np.all(np.isfinite(x)):
        return x0
    return x


def _correct(scenario: Scenario, t: float, x: np.ndarray, tol: Tolerances, max_iter: int = 12):
    """Newton at frozen t, iterated to rounding level; None if it does not settle."""
    e = scenario.energy
    for _ in range(max_iter):
        g = e.gradient(t, x)
        h = e.hessian(t, x)
        try:
            dx = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            return None
        x = x - dx
        if not np.all(np.isfinite(x)):
            return None
        if np.linalg.norm(dx) <= 1e-14 * (1 + np.linalg.norm(x)):
            break
    g = e.gradient(t, x)
    if np.linalg.norm(g) > tol.branch_tol * _scale(e.hessian(t, x)):
        return None
    return x


def _state(scenario: Scenario, t: float, x: np.ndarray):
    """(tracked eigenvalue, its t-derivative along the branch, du/dt, eigenvalues)."""
    e = scenario.energy
    h = e.hessian(t, x)
    w, vecs = jacobi_eigh(h)
    k = int(np.argmin(np.abs(w)))
    v = vecs[:, k]
    xdot = -np.linalg.solve(h, e.grad_t(t, x))
    dh = e.hess_t(t, x) + np.einsum("ijk,k->ij", e.third_tensor(t, x), xdot)
    return float(w[k]), float(v @ dh @ v), xdot, w, v


def _track(scenario: Scenario, t0: float, x0: np.ndarray, direction: int, t_stop: float,
           tol: Tolerances, trigger: float | None):
    """Continue the equilibrium through (t0, x0) toward t_stop.

    Returns the samples and, when ``trigger`` fires, the eigenvector at the last sample.
    """
    dt_max = scenario.T / 200.0
    t, x = float(t0), np.asarray(x0, dtype=float)
    ts, xs, lams, dxs = [], [], [], []
    sign0 = None
    while True:
        try:
            lam, lam_dot, xdot, w, v = _state(scenario, t, x)
        except np.linalg.LinAlgError as err:
            raise BranchError(f"singular Hessian at t={t} before the fold trigger") from err
        if sign0 is None:
            sign0 = np.sign(w)
        ts.append(t)
        xs.append(x)
        lams.append(lam)
        dxs.append(xdot)
        remaining = (t_stop - t) * direction
        if remaining <= 0:
            return ts, xs, lams, dxs, None
        if trigger is not None and abs(lam) < trigger:
            return ts, xs, lams, dxs, v
        h = dt_max
        rate = direction * lam_dot * np.sign(lam)  # d|lam|/d(step)
        if rate != 0:
            h = min(h, KAPPA * abs(lam) / abs(rate))
        if h >= remaining or remaining - h < 1e-3 * h:
            h = remaining
        while True:
            t_new = t + direction * h
            if h == remaining:
                t_new = t_stop
            pred = x + (t_new - t) * xdot
            x_new = _correct(scenario, t_new, pred, tol)
            ok = x_new is not None
            if ok:
                w_new = jacobi_eigh(scenario.energy.hessian(t_new, x_new))[0]
                # inertia must persist and the tracked eigenvalue may not collapse in one step
                lam_new = w_new[int(np.argmin(np.abs(w_new)))]
                ok = np.array_equal(np.sign(w_new), sign0) and abs(lam_new) > 0.25 * abs(lam) * (rate < 0)
            if ok:
                t, x = t_new, x_new
                break
            h *= 0.5
            if h < tol.min_step * max(1.0, scenario.T):
                raise BranchError(f"corrector failed at t={t}: step fell below min_step")


def continue_branch(scenario: Scenario, t_start: float, x_start, tol: Tolerances = DEFAULT,
                    index: int = 0) -> Branch:
    """Stable branch from a nondegenerate minimum until T or a fold."""
    e = scenario.energy
    x0 = np.asarray(x_start, dtype=float)
    g = e.gradient(t_start, x0)
    if np.linalg.norm(g) > math.sqrt(tol.newton_tol) * _scale(e.hessian(t_start, x0)):
        raise BranchError(f"start point is not an equilibrium: |grad|={np.linalg.norm(g):.3e}")
    x0 = _correct(scenario, t_start, x0, tol)
    if x0 is None:
        raise BranchError("Newton polish of the start point failed")
    w = jacobi_eigh(e.hessian(t_start, x0))[0]
    if not w[0] > tol.degeneracy_tol * max(1.0, float(np.abs(w).max())):
        raise AssumptionViolation(f"start point ({t_start}, {x0}) is not a nondegenerate minimum")
    trigger = tol.fold_trigger * float(w[0])
    ts, xs, lams, dxs, v = _track(scenario, t_start, x0, +1, scenario.T, tol, trigger)
    fold = None
    t_end, reason = scenario.T, "reached_T"
    if v is not None:
        fold = refine_fold(scenario, ts[-1], xs[-1], ell_guess=v, tol=tol)
        if not fold.t > ts[-1]:
            raise BranchError(f"fold refined to t={fold.t} behind the last branch sample {ts[-1]}")
        t_end, reason = fold.t, "fold"
    return Branch(
        np.array(ts), np.array(xs), np.array(lams), np.array(dxs),
        float(t_start), float(t_end), reason, fold, index, "stable", scenario, tol,
    )


def sibling_branch(scenario: Scenario, fold: FoldPoint, r: float | None = None,
                   tol: Tolerances = DEFAULT, start_offset: float | None = None) -> Branch:
    """The other equilibrium branch entering the fold, continued backward on [t - r, t]."""
    if fold.b * fold.c <= 0:
        raise AssumptionViolation("sibling branch needs b and c of the same sign")
    if r is None:
        r = 0.1 * scenario.T
    r = min(r, fold.t)
    dt0 = start_offset if start_offset is not None else 1e-8 * max(1.0, scenario.T)
    # local normal form: b (t - t_hat) + c z^2 / 2 = 0 along ell; the stable root has c z > 0
    z = -math.copysign(math.sqrt(2.0 * fold.b * dt0 / fold.c), fold.c)
    t0 = fold.t - dt0
    x0 = _correct(scenario, t0, fold.x + z * fold.ell, tol)
    if x0 is None:
        raise BranchError("could not seed the sibling branch next to the fold")
    ts, xs, lams, dxs, _ = _track(scenario, t0, x0, -1, fold.t - r, tol, None)
    ts, xs, lams, dxs = ts[::-1], xs[::-1], lams[::-1], dxs[::-1]
    return Branch(
        np.array(ts), np.array(xs), np.array(lams), np.array(dxs),
        float(ts[0]), float(fold.t), "fold", fold, -1, "sibling", scenario, tol,
    )


# ------------------------------------------------------------ the evolution


@dataclass
class PiecewiseEvolution:
    scenario: Scenario
    branches: list[Branch]
    folds: list[FoldPoint]
    heteroclinics: list[Heteroclinic]
    tol: Tolerances = field(default=DEFAULT, repr=False)

    @property
    def k(self) -> int:
        return len(self.branches)

    @property
    def jump_times(self) -> list[float]:
        return [f.t for f in self.folds]

    @property
    def landing_points(self) -> list[np.ndarray]:
        return [h.w_inf for h in self.heteroclinics]

    def graph_polylines(self, max_gap: float | None = None) -> list[np.ndarray]:
        """Completed graph as polylines in R^(1+n): branches and the vertical jump segments."""
        out = []
        for br in self.branches:
            pts = np.column_stack([br.ts, br.xs])
            if br.fold is not None:
                pts = np.vstack([pts, np.concatenate([[br.fold.t], br.fold.x])])
            out.append(pts)
        for het in self.heteroclinics:
            gap = max_gap if max_gap is not None else 0.01 * float(np.linalg.norm(het.w_inf - het.xi))
            curve = sample_curve(het, gap)
            out.append(np.column_stack([np.full(len(curve), het.tau), curve]))
        return out


def eval_u(pe: PiecewiseEvolution, t: float) -> np.ndarray:
    """The limit evolution at t; right-continuous at jump times."""
    T = pe.scenario.T
    if not -1e-14 * T <= t <= T * (1 + 1e-14):
        raise ValueError(f"t={t} outside [0, {T}]")
    i = bisect.bisect_right(pe.jump_times, t)
    br = pe.branches[i]
    return br.evaluate(min(max(t, br.t_start), br.t_end))


def build_slow_fast_evolution(scenario: Scenario, tol: Tolerances = DEFAULT,
                              max_branches: int = MAX_BRANCHES) -> PiecewiseEvolution:
    try:
        scenario.validate_y0()
    except ScenarioError as err:
        raise AssumptionViolation(str(err)) from None
    t, x = 0.0, np.asarray(scenario.y0, dtype=float)
    branches: list[Branch] = []
    folds: list[FoldPoint] = []
    hets: list[Heteroclinic] = []
    while True:
        if len(branches) >= max_branches:
            raise BranchError(f"more than {max_branches} branches: folds accumulate")
        br = continue_branch(scenario, t, x, tol, index=len(branches))
        branches.append(br)
        if br.end_reason == "reached_T":
            break
        fold = br.fold
        rep = transversality(scenario, fold, tol)
        if not rep.accepted:
            raise AssumptionViolation(f"fold at t={fold.t:.12g} rejected: " + "; ".join(rep.reasons))
        if not rep.same_sign:
            raise AssumptionViolation(
                f"fold at t={fold.t:.12g} has b={fold.b:.6g}, c={fold.c:.6g} of opposite sign"
            )
        het = heteroclinic_from_fold(scenario, fold, tol)
        landing = check_landing(scenario, het, tol)
        if not landing.passed:
            raise AssumptionViolation(
                f"heteroclinic from the fold at t={fold.t:.12g} lands on {het.w_inf} "
                f"with lambda_min={landing.lambda_min:.3e}: not a nondegenerate minimum"
            )
        folds.append(fold)
        hets.append(het)
        t, x = fold.t, het.w_inf
    return PiecewiseEvolution(scenario, branches, folds, hets, tol)


# ------------------------------------------- geometry right of a fold


@dataclass
class RightGeometry:
    r: float
    R: float
    min_grad: float
    passed: bool


def right_geometry(scenario: Scenario, fold: FoldPoint, het: Heteroclinic,
                   n_times: int = 21, n_dirs: int = 64) -> RightGeometry:
    """Largest r (halving from 0.1 T) such that grad f != 0 on (t, t+r] x sphere(x, R), R = Lambda/2."""
    R = 0.5 * het.Lambda
    dirs = _sphere_directions(scenario.n, n_dirs)
    pts = fold.x + R * dirs
    r = min(0.1 * scenario.T, scenario.T - fold.t)
    floor = 1e-12
    while r > 1e-6 * scenario.T:
        ts = fold.t + r * np.arange(1, n_times + 1) / n_times
        m = min(float(np.linalg.norm(scenario.energy.gradient_many(t, pts), axis=-1).min()) for t in ts)
        if m > floor:
            return RightGeometry(r, R, m, True)
        r *= 0.5
    return RightGeometry(r, R, 0.0, False)
