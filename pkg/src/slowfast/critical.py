"""Critical points of f(t, .), fold (saddle-node) refinement and transversality."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .config import DEFAULT, Tolerances
from .energy import Scenario
from .linalg import jacobi_eigh

log = logging.getLogger(__name__)


class AssumptionViolation(RuntimeError):
    """A structural hypothesis on f failed on the computed data."""


class FoldError(RuntimeError):
    pass


class FoldNotConverged(FoldError):
    pass


class SingularFoldError(FoldError):
    """Bordered Jacobian singular at the solution: b or c vanishes."""

    def __init__(self, message: str, fold: "FoldPoint"):
        super().__init__(message)
        self.fold = fold


@dataclass(frozen=True)
class CriticalPoint:
    t: float
    x: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    grad_norm: float
    kind: str  # "min" | "saddle" | "degenerate"

    @property
    def lambda_min(self) -> float:
        return float(self.eigvals[0])


@dataclass(frozen=True)
class FoldPoint:
    t: float
    x: np.ndarray
    ell: np.ndarray
    b: float
    c: float
    residuals: tuple[float, float]
    eigvals: np.ndarray
    iterations: int = 0
    jacobian_cond: float = 1.0

    @property
    def same_sign(self) -> bool:
        return (self.b > 0) == (self.c > 0) and self.b != 0 and self.c != 0

    def flipped(self) -> "FoldPoint":
        return FoldPoint(
            self.t, self.x, -self.ell, -self.b, -self.c, self.residuals, self.eigvals,
            self.iterations, self.jacobian_cond,
        )


def _scale(h: np.ndarray) -> float:
    return max(1.0, float(np.abs(h).max()))


def classify(scenario: Scenario, t: float, x, tol: Tolerances = DEFAULT) -> CriticalPoint:
    e = scenario.energy
    x = np.asarray(x, dtype=float)
    h = e.hessian(t, x)
    w, v = jacobi_eigh(h)
    g = float(np.linalg.norm(e.gradient(t, x)))
    dtol = tol.degeneracy_tol * max(1.0, float(np.abs(w).max()))
    if np.abs(w).min() <= dtol:
        kind = "degenerate"
    elif w[0] > dtol:
        kind = "min"
    else:
        kind = "saddle"
    return CriticalPoint(float(t), x, w, v, g, kind)


def seed_points(n: int, radius: float, count: int | None = None) -> np.ndarray:
    """Deterministic Halton seeds mapped onto the closed ball B(0, radius)."""
    count = count or 32 + 16 * n
    u = qmc.Halton(d=n, scramble=False).random(count + 1)[1:]
    z = 2.0 * u - 1.0
    norm2 = np.linalg.norm(z, axis=1)
    norm_inf = np.abs(z).max(axis=1)
    factor = np.divide(norm_inf, norm2, out=np.ones_like(norm2), where=norm2 > 0)
    return z * factor[:, None] * radius


def _newton_batch(scenario: Scenario, t: float, xs: np.ndarray, tol: Tolerances,
                  max_iter: int = 200, max_step: float = math.inf):
    """Damped Newton on grad f(t, .) = 0 for every row of ``xs`` at once."""
    e = scenario.energy
    x = xs.copy()
    g = e.gradient_many(t, x)
    gn = np.linalg.norm(g, axis=1)
    done = np.zeros(len(x), dtype=bool)
    best = gn.copy()
    since_best = np.zeros(len(x), dtype=int)
    for _ in range(max_iter):
        active = ~done
        if not active.any():
            break
        xa, ga = x[active], g[active]
        h = e.hessian_many(t, xa)
        w, v = np.linalg.eigh(h)
        floor = 1e-14 * np.maximum(1.0, np.abs(w).max(axis=1, keepdims=True))
        w = np.where(np.abs(w) < floor, np.where(w < 0, -floor, floor), w)
        step = -np.einsum("mij,mj->mi", v, np.einsum("mji,mj->mi", v, ga) / w)
        sn = np.linalg.norm(step, axis=1)
        too_long = sn > max_step
        step[too_long] *= (max_step / sn[too_long])[:, None]
        alpha = np.ones(len(xa))
        gna = gn[active]
        scale = np.maximum(1.0, np.abs(h).reshape(len(xa), -1).max(axis=1))
        # near the root the merit function is at rounding level: take full steps
        accepted = gna <= 1e3 * tol.newton_tol * scale
        x_new = xa.copy()
        g_new = ga.copy()
        if accepted.any():
            x_new[accepted] = xa[accepted] + step[accepted]
            g_new[accepted] = e.gradient_many(t, x_new[accepted])
        for _ls in range(25):
            if accepted.all():
                break
            trial = xa + alpha[:, None] * step
            gt = e.gradient_many(t, trial)
            gtn = np.linalg.norm(gt, axis=1)
            ok = (~accepted) & ((gtn < (1 - 1e-4 * alpha) * gna) | (gna == 0))
            x_new[ok], g_new[ok] = trial[ok], gt[ok]
            accepted |= ok
            alpha = np.where(accepted, alpha, alpha * 0.5)
        # no descent along the Newton direction: a local minimum of |grad f|
        # that is not a root (e.g. the ghost of a vanished fold); retire the row
        stalled = ~accepted | (alpha < 2.0**-16)
        moved = np.linalg.norm(x_new - xa, axis=1)
        gnn = np.linalg.norm(g_new, axis=1)
        conv = (gnn <= tol.newton_tol * scale) & (moved <= 1e-12 * (1.0 + np.linalg.norm(x_new, axis=1)))
        idx = np.flatnonzero(active)
        x[idx], g[idx], gn[idx] = x_new, g_new, gnn
        improved = gnn < 0.5 * best[idx]
        best[idx] = np.where(improved, gnn, best[idx])
        since_best[idx] = np.where(improved, 0, since_best[idx] + 1)
        near = gnn <= 1e3 * tol.newton_tol * scale
        slow = (since_best[idx] > 20) & ~near
        done[idx[conv | stalled | slow]] = True
    hs = e.hessian_many(t, x)
    scale = np.maximum(1.0, np.abs(hs).reshape(len(x), -1).max(axis=1))
    ok = np.all(np.isfinite(x), axis=1) & (gn <= tol.newton_tol * scale)
    return x, ok


def find_critical_points(scenario: Scenario, t: float, tol: Tolerances = DEFAULT,
                         seeds: np.ndarray | None = None) -> list[CriticalPoint]:
    """Multi-start Newton census of the zeros of grad f(t, .)."""
    if not -1e-12 <= t <= scenario.T + 1e-12:
        raise ValueError(f"t={t} outside [0, {scenario.T}]")
    radius = scenario.ball_radius + 1.0
    if seeds is None:
        seeds = seed_points(scenario.n, radius)
    x, ok = _newton_batch(scenario, t, seeds, tol, max_step=radius)
    pts = x[ok]
    if len(pts) == 0:
        log.warning("no critical point found at t=%g; seeding missed every basin", t)
        return []
    pts = pts[np.lexsort(pts.T[::-1])]
    kept: list[np.ndarray] = []
    for p in pts:
        if not any(np.linalg.norm(p - q) <= tol.dedup_tol for q in kept):
            kept.append(p)
    out = [classify(scenario, t, p, tol) for p in kept]
    limit = scenario.ball_radius + tol.ball_slack
    for cp in out:
        if np.linalg.norm(cp.x) > limit:
            raise AssumptionViolation(
                f"critical point {cp.x} at t={t} lies outside the ball of radius "
                f"sqrt(a0/c0)={scenario.ball_radius:.6g}: coercivity constants are wrong"
            )
    return out


def newton_at(scenario: Scenario, t: float, x, tol: float, max_iter: int = 30) -> np.ndarray | None:
    """Plain Newton at frozen t; ``None`` when it fails to reach ``tol``."""
    e = scenario.energy
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        g = e.gradient(t, x)
        h = e.hessian(t, x)
        if np.linalg.norm(g) <= tol * _scale(h):
            return x
        try:
            x = x - np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(x)):
            return None
    g = e.gradient(t, x)
    return x if np.linalg.norm(g) <= tol * _scale(e.hessian(t, x)) else None


# ---------------------------------------------------------------- folds


def _fold_system(scenario: Scenario, z: np.ndarray):
    n = scenario.n
    e = scenario.energy
    t, x, ell = z[0], z[1 : n + 1], z[n + 1 :]
    g = e.gradient(t, x)
    h = e.hessian(t, x)
    F = np.concatenate([g, h @ ell, [ell @ ell - 1.0]])
    J = np.zeros((2 * n + 1, 2 * n + 1))
    J[:n, 0] = e.grad_t(t, x)
    J[:n, 1 : n + 1] = h
    J[n : 2 * n, 0] = e.hess_t(t, x) @ ell
    J[n : 2 * n, 1 : n + 1] = np.einsum("ijk,j->ik", e.third_tensor(t, x), ell)
    J[n : 2 * n, n + 1 :] = h
    J[2 * n, n + 1 :] = 2.0 * ell
    return F, J, h


def refine_fold(scenario: Scenario, t_guess: float, x_guess, ell_guess=None,
                tol: Tolerances = DEFAULT, max_iter: int = 50) -> FoldPoint:
    """Newton on (grad f, hess f . l, |l|^2 - 1) = 0 in the unknowns (t, x, l)."""
    n = scenario.n
    e = scenario.energy
    x0 = np.asarray(x_guess, dtype=float).reshape(n)
    if ell_guess is None:
        w, v = jacobi_eigh(e.hessian(t_guess, x0))
        ell0 = v[:, int(np.argmin(np.abs(w)))]
    else:
        ell0 = np.asarray(ell_guess, dtype=float)
        ell0 = ell0 / np.linalg.norm(ell0)
    z = np.concatenate([[float(t_guess)], x0, ell0])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        F, J, h = _fold_system(scenario, z)
        if not np.all(np.isfinite(F)):
            break
        step = np.linalg.lstsq(J, -F, rcond=None)[0]
        z = z + step
        F, J, h = _fold_system(scenario, z)
        res = max(np.linalg.norm(F[:n]), np.linalg.norm(F[n : 2 * n]), abs(F[-1]))
        small_step = np.linalg.norm(step) <= 1e-12 * (1.0 + np.linalg.norm(z))
        if res <= tol.fold_tol * _scale(h) and small_step:
            converged = True
            break
    if not converged:
        raise FoldNotConverged(f"bordered fold system did not converge in {max_iter} iterations "
                               f"from t={t_guess}, x={list(x0)}")
    t, x, ell = float(z[0]), z[1 : n + 1].copy(), z[n + 1 :].copy()
    ell /= np.linalg.norm(ell)
    F, J, h = _fold_system(scenario, np.concatenate([[t], x, ell]))
    sv = np.linalg.svd(J, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    fold = FoldPoint(
        t=t,
        x=x,
        ell=ell,
        b=float(e.grad_t(t, x) @ ell),
        c=e.cubic_form(t, x, ell),
        residuals=(float(np.linalg.norm(F[:n])), float(np.linalg.norm(F[n : 2 * n]))),
        eigvals=jacobi_eigh(h)[0],
        iterations=it,
        jacobian_cond=cond,
    )
    if cond > 1e10:
        raise SingularFoldError(
            f"bordered Jacobian singular at t={t:.6g}, x={list(x)} (cond={cond:.2e}); "
            f"b={fold.b:.3e}, c={fold.c:.3e}",
            fold,
        )
    return fold


@dataclass
class TransversalityReport:
    b: float
    c: float
    same_sign: bool
    verdict: str  # "ACCEPT" | "REJECT"
    eigen_gap: float  # second-smallest eigenvalue minus |smallest|
    psd: bool
    reasons: list[str] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.verdict == "ACCEPT"


def transversality(scenario: Scenario, fold: FoldPoint, tol: Tolerances = DEFAULT) -> TransversalityReport:
    w = np.asarray(fold.eigvals)
    wabs = np.sort(np.abs(w))
    gap = float(wabs[1] - wabs[0]) if len(w) > 1 else math.inf
    dtol = tol.degeneracy_tol * max(1.0, float(np.abs(w).max()))
    rest = np.delete(w, int(np.argmin(np.abs(w))))
    psd = bool(np.all(rest > dtol))
    reasons = []
    if not abs(fold.b) > tol.trans_tol:
        reasons.append(f"(b) grad_x f_t . l = {fold.b:.3e} vanishes")
    if not abs(fold.c) > tol.trans_tol:
        reasons.append(f"(c) cubic form = {fold.c:.3e} vanishes")
    if not gap > dtol:
        reasons.append(f"(a) zero eigenvalue not simple (gap {gap:.3e})")
    return TransversalityReport(
        b=fold.b,
        c=fold.c,
        same_sign=fold.same_sign,
        verdict="ACCEPT" if not reasons else "REJECT",
        eigen_gap=gap,
        psd=psd,
        reasons=reasons,
    )


@dataclass
class FoldCensus:
    folds: list[FoldPoint]
    singular: list[FoldPoint]
    failures: list[str]
    times: np.ndarray
    counts: list[int]


def fold_census(scenario: Scenario, n_times: int = 101, tol: Tolerances = DEFAULT) -> FoldCensus:
    """Locate every degenerate critical point on [0, T] from a t-grid scan."""
    times = np.linspace(0.0, scenario.T, n_times)
    scans = [find_critical_points(scenario, t, tol) for t in times]
    guesses: list[tuple[float, np.ndarray]] = []
    for t, cps in zip(times, scans):
        guesses += [(t, cp.x) for cp in cps if cp.kind == "degenerate"]
    for k in range(n_times - 1):
        a, b = scans[k], scans[k + 1]
        if len(a) == len(b):
            continue
        t_more, more = (times[k], a) if len(a) > len(b) else (times[k + 1], b)
        if len(more) < 2:
            continue
        best = None
        for i in range(len(more)):
            for j in range(i + 1, len(more)):
                d = np.linalg.norm(more[i].x - more[j].x)
                if best is None or d < best[0]:
                    best = (d, 0.5 * (more[i].x + more[j].x))
        guesses.append((0.5 * (times[k] + times[k + 1]), best[1]))
        guesses.append((t_more, best[1]))

    folds: list[FoldPoint] = []
    singular: list[FoldPoint] = []
    failures: list[str] = []

    def known(f: FoldPoint, pool) -> bool:
        return any(abs(f.t - g.t) + np.linalg.norm(f.x - g.x) < 1e-6 for g in pool)

    for t, x in guesses:
        try:
            f = refine_fold(scenario, t, x, tol=tol)
        except SingularFoldError as err:
            if not known(err.fold, singular):
                singular.append(err.fold)
            continue
        except FoldError as err:
            failures.append(str(err))
            continue
        if -tol.time_sep * scenario.T <= f.t <= scenario.T * (1 + tol.time_sep) and not known(f, folds):
            folds.append(f)
    folds.sort(key=lambda f: f.t)
    singular.sort(key=lambda f: f.t)
    return FoldCensus(folds, singular, failures, times, [len(s) for s in scans])


def check_fold_times(folds: list[FoldPoint], T: float, tol: Tolerances = DEFAULT) -> list[str]:
    """Violations of finiteness / injective time projection / 0,T excluded."""
    sep = tol.time_sep * T
    problems = []
    ts = sorted(f.t for f in folds)
    for a, b in zip(ts, ts[1:]):
        if b - a <= sep:
            problems.append(f"two folds share the time {a:.12g} (projection not injective)")
    for t in ts:
        if t <= sep or t >= T - sep:
            problems.append(f"fold at t={t:.12g} coincides with an endpoint of [0, T]")
    return problems
