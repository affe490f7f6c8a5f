"""The eps-gradient flow  eps u' = -grad_x f(t, u)  on [0, T].

Integrated by TR-BDF2 written as a three-stage ESDIRK (L-stable, stiffly
accurate, second order with an embedded third-order-consistent companion for
step control) using Newton on every implicit stage with the exact Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT, Tolerances
from .energy import Scenario


class FlowError(RuntimeError):
    pass


_G = 2.0 - math.sqrt(2.0)
_D = _G / 2.0
_W = math.sqrt(2.0) / 4.0
_C = (0.0, _G, 1.0)
_A = ((0.0, 0.0, 0.0), (_D, _D, 0.0), (_W, _W, _D))
_B = np.array([_W, _W, _D])
_BHAT = np.array([(1.0 - _W) / 3.0, (3.0 * _W + 1.0) / 3.0, _D / 3.0])
_E = _B - _BHAT


@dataclass
class Trajectory:
    eps: float
    times: np.ndarray
    states: np.ndarray  # (m, n)
    derivs: np.ndarray  # u' = -grad f / eps at the accepted states
    step_sizes: np.ndarray  # step that produced each sample (0 for the first)
    x_init: np.ndarray
    bound: float  # a-priori bound on |u|^2
    bound_violations: int
    step_stats: dict
    events: list = field(default_factory=list)

    def record(self, kind: str, t: float) -> None:
        if (kind, t) not in self.events:
            self.events.append((kind, t))

    @property
    def deriv_norms(self) -> np.ndarray:
        return np.linalg.norm(self.derivs, axis=1)

    @property
    def dissipation(self) -> np.ndarray:
        """Running trapezoid integral of eps |u'|^2."""
        g = self.eps * self.deriv_norms**2
        h = np.diff(self.times)
        return np.concatenate([[0.0], np.cumsum(0.5 * h * (g[1:] + g[:-1]))])

    def at(self, t):
        """Cubic Hermite dense output."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        ts = self.times
        k = np.clip(np.searchsorted(ts, t_arr, side="right") - 1, 0, len(ts) - 2)
        h = ts[k + 1] - ts[k]
        s = ((t_arr - ts[k]) / h)[:, None]
        h = h[:, None]
        out = (
            (1 + 2 * s) * (1 - s) ** 2 * self.states[k]
            + s * (1 - s) ** 2 * h * self.derivs[k]
            + s * s * (3 - 2 * s) * self.states[k + 1]
            + s * s * (s - 1) * h * self.derivs[k + 1]
        )
        return out[0] if np.ndim(t) == 0 else out


def a_priori_bound(scenario: Scenario, x_init) -> float:
    x_init = np.asarray(x_init, dtype=float)
    return max(scenario.a0 / scenario.c0, float(x_init @ x_init))


def integrate_eps_flow(scenario: Scenario, eps: float, x_init=None, tol: Tolerances = DEFAULT,
                       perturb=None, max_step: float | None = None, first_step: float | None = None) -> Trajectory:
    """Solve eps u' = -grad f(t, u), u(0) = x_init (default y0 + eps * perturb)."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    e = scenario.energy
    n, T = scenario.n, scenario.T
    if x_init is None:
        x_init = np.asarray(scenario.y0, dtype=float)
        if perturb is not None:
            x_init = x_init + eps * np.asarray(perturb, dtype=float)
    u = np.asarray(x_init, dtype=float).reshape(n).copy()
    if not np.all(np.isfinite(u)):
        raise ValueError("x_init must be finite")
    # local error targets sit a decade below ode_tol so the accumulated global
    # error over ~1e3 steps stays within it
    rtol = 0.1 * tol.ode_tol
    atol = 1e-3 * tol.ode_tol
    h_max = max_step if max_step is not None else T / 100.0
    h_min = tol.min_step * T
    eye = np.eye(n)

    def F(t, x):
        return -e.gradient(t, x) / eps

    bound = a_priori_bound(scenario, u)
    t = 0.0
    k1 = F(t, u)
    h = first_step if first_step is not None else min(h_max, 1e-3 * eps, T)
    times, states, derivs, steps = [0.0], [u.copy()], [k1.copy()], [0.0]
    stats = {"accepted": 0, "rejected": 0, "newton_failures": 0, "max_stage_residual": 0.0}
    violations = int(u @ u > bound + tol.bound_slack)

    while t < T:
        if t + h >= T or T - (t + h) < 1e-10 * T:
            h = T - t
        sc = atol + rtol * np.abs(u)
        ks = [k1, None, None]
        ok = True
        U = u
        for i in (1, 2):
            ti = t + _C[i] * h
            base = u + h * sum(_A[i][j] * ks[j] for j in range(i))
            U = base + (h * _D) * ks[i - 1]
            for _it in range(10):
                r = U - base - h * _D * F(ti, U)
                m = eye + (h * _D / eps) * e.hessian(ti, U)
                dU = np.linalg.solve(m, r)
                U = U - dU
                if not np.all(np.isfinite(U)):
                    ok = False
                    break
                if np.sqrt(np.mean((dU / sc) ** 2)) <= 1e-3:
                    break
            else:
                ok = False
            if not ok:
                break
            ks[i] = (U - base) / (h * _D)
            res = np.sqrt(np.mean(((U - base - h * _D * F(ti, U)) / sc) ** 2))
            stats["max_stage_residual"] = max(stats["max_stage_residual"], res * rtol)
        if not ok:
            stats["newton_failures"] += 1
            stats["rejected"] += 1
            h *= 0.25
            if h < h_min:
                raise FlowError(f"Newton failed at t={t}: step fell below min_step (stiffness)")
            continue
        u_new = U
        est = h * (_E[0] * ks[0] + _E[1] * ks[1] + _E[2] * ks[2])
        # filter the estimate through the stage matrix so it stays bounded for stiff modes
        m = eye + (h * _D / eps) * e.hessian(t + h, u_new)
        est = np.linalg.solve(m, est)
        scale = atol + rtol * np.maximum(np.abs(u), np.abs(u_new))
        err = float(np.sqrt(np.mean((est / scale) ** 2)))
        if err <= 1.0:
            t_new = T if h == T - t else t + h
            t, u = t_new, u_new
            k1 = F(t, u)
            times.append(t)
            states.append(u.copy())
            derivs.append(k1.copy())
            steps.append(h)
            violations += int(u @ u > bound + tol.bound_slack)
            stats["accepted"] += 1
            fac = 0.9 * err ** (-1.0 / 3.0) if err > 0 else 5.0
            h = min(h_max, h * min(5.0, max(0.2, fac)))
        else:
            stats["rejected"] += 1
            h *= min(0.9, max(0.2, 0.9 * err ** (-1.0 / 3.0)))
            if h < h_min:
                raise FlowError(f"step fell below min_step at t={t} (stiffness diagnostic)")

    return Trajectory(
        eps=float(eps),
        times=np.array(times),
        states=np.array(states),
        derivs=np.array(derivs),
        step_sizes=np.array(steps),
        x_init=np.asarray(x_init, dtype=float).reshape(n),
        bound=bound,
        bound_violations=violations,
        step_stats=stats,
    )


@dataclass
class DissipationCheck:
    residual: float
    lhs: float  # eps * int |u'|^2
    rhs: float  # f(0, u(0)) - f(T, u(T)) + int f_t


def dissipation_identity_residual(scenario: Scenario, traj: Trajectory) -> DissipationCheck:
    """eps int |u'|^2 - [f(0,u0) - f(T,uT) + int f_t], by endpoint-corrected trapezoid.

    The correction h^2 (g'_a - g'_b)/12 uses exact time derivatives of both
    integrands along the flow, which makes the rule fourth order.
    """
    e = scenario.energy
    eps = traj.eps
    ts, xs, ds = traj.times, traj.states, traj.derivs
    g = np.empty(len(ts))
    dg = np.empty(len(ts))
    p = np.empty(len(ts))
    dp = np.empty(len(ts))
    for i, (t, x, d) in enumerate(zip(ts, xs, ds)):
        grad = e.gradient(t, x)
        gt = e.grad_t(t, x)
        hh = e.hessian(t, x)
        g[i] = grad @ grad / eps
        dg[i] = 2.0 * grad @ (gt + hh @ d) / eps
        p[i] = e.f_t(t, x)
        dp[i] = e.f_tt(t, x) + gt @ d
    h = np.diff(ts)

    def quad(y, dy):
        return float(np.sum(0.5 * h * (y[1:] + y[:-1]) + h * h * (dy[:-1] - dy[1:]) / 12.0))

    lhs = quad(g, dg)
    rhs = e.value(ts[0], xs[0]) - e.value(ts[-1], xs[-1]) + quad(p, dp)
    return DissipationCheck(lhs - rhs, lhs, rhs)


def _bisect(fun, a: float, b: float, tol: float) -> float:
    fa = fun(a)
    while b - a > tol:
        m = 0.5 * (a + b)
        fm = fun(m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def _distance(traj: Trajectory, x1: np.ndarray):
    return lambda t: float(np.linalg.norm(traj.at(t) - x1))


def exit_time(traj: Trajectory, x1, delta: float, tau1: float, tol: Tolerances = DEFAULT) -> float | None:
    """First t > tau1 with |u(t) - x1| = delta; None when there is no crossing."""
    x1 = np.asarray(x1, dtype=float)
    dist = _distance(traj, x1)
    if not dist(tau1) < delta:
        raise ValueError(f"|u(tau1) - x1| = {dist(tau1):.6g} is not below delta={delta}")
    ts = traj.times
    d = np.linalg.norm(traj.states - x1, axis=1)
    idx = np.flatnonzero((ts > tau1) & (d >= delta))
    if len(idx) == 0:
        return None
    k = idx[0]
    a = max(tau1, ts[k - 1])
    T = ts[-1]
    t_ev = _bisect(lambda s: dist(s) - delta, a, ts[k], tol.event_tol * T)
    traj.record("exit_delta", t_ev)
    return t_ev


def last_entry_time(traj: Trajectory, x1, delta_k: float, t_exit: float, tol: Tolerances = DEFAULT) -> float:
    """Last t <= t_exit with |u(t) - x1| = delta_k."""
    x1 = np.asarray(x1, dtype=float)
    dist = _distance(traj, x1)
    T = traj.times[-1]
    if abs(dist(t_exit) - delta_k) <= 1e-12 * max(1.0, delta_k) or dist(t_exit) < delta_k:
        traj.record("last_entry_delta", t_exit)
        return t_exit
    ts = traj.times
    d = np.linalg.norm(traj.states - x1, axis=1)
    idx = np.flatnonzero((ts < t_exit) & (d <= delta_k))
    if len(idx) == 0:
        raise FlowError(f"trajectory never enters B(x1, {delta_k}) before t={t_exit}")
    k = idx[-1]
    b = min(t_exit, ts[k + 1])
    t_ev = _bisect(lambda s: dist(s) - delta_k, ts[k], b, tol.event_tol * T)
    traj.record("last_entry_delta", t_ev)
    return t_ev
