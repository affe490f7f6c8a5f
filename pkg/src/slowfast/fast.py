"""Fast dynamics: the frozen-time gradient flow  v' = -grad f(tau, v).

The heteroclinic issuing from a fold is found by shooting: a seed is placed a
small distance along the kernel direction, on the side where the descent
direction points away from the fold, and integrated forward until it lands.
Its time-translation freedom is removed by anchoring s = 0 at the first exit
from a sphere around the fold point.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .config import DEFAULT, Tolerances
from .critical import CriticalPoint, FoldPoint, classify, find_critical_points, newton_at
from .energy import Scenario
from .linalg import jacobi_eigh


class FastDynamicsError(RuntimeError):
    pass


@dataclass(frozen=True)
class Heteroclinic:
    tau: float
    xi: np.ndarray
    ell: np.ndarray  # unit kernel vector oriented along the departure
    c: float  # cubic coefficient along ``ell``
    s: np.ndarray  # sample times in the current phase
    v: np.ndarray  # samples, shape (m, n)
    w_inf: np.ndarray
    phase: str  # "seed" (s=0 at the seed) or "first-crossing"
    delta_anchor: float | None
    shift: float  # integration time corresponding to s = 0
    seed_offset: float
    Lambda: float  # distance from xi to the other critical points of f(tau, .)
    dense: object = field(repr=False, compare=False)

    @property
    def s_min(self) -> float:
        return float(self.s[0])

    @property
    def s_max(self) -> float:
        return float(self.s[-1])

    def __call__(self, s):
        """v(s); analytic algebraic tail before the seed, w_inf after landing."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        u = s_arr + self.shift
        u_end = self.s[-1] + self.shift
        out = np.empty((len(u), len(self.xi)))
        inside = (u >= 0.0) & (u <= u_end)
        if inside.any():
            out[inside] = self.dense(u[inside]).T
        before = u < 0.0
        if before.any():
            # x' = -(|c|/2) x^2 along ell, matched to the seed distance at u = 0
            u0 = 2.0 / (abs(self.c) * self.seed_offset)
            z = 1.0 / (0.5 * abs(self.c) * (u0 - u[before]))
            out[before] = self.xi + z[:, None] * self.ell
        after = u > u_end
        if after.any():
            out[after] = self.w_inf
        return out[0] if np.ndim(s) == 0 else out


def other_critical_distance(scenario: Scenario, t: float, x, tol: Tolerances = DEFAULT) -> tuple[float, list[CriticalPoint]]:
    """Distance from ``x`` to the nearest *other* critical point of f(t, .)."""
    x = np.asarray(x, dtype=float)
    cps = find_critical_points(scenario, t, tol)
    exclude = 1e-3 * max(1.0, float(np.linalg.norm(x)))
    others = [cp for cp in cps if np.linalg.norm(cp.x - x) > exclude]
    if not others:
        return math.inf, []
    return min(float(np.linalg.norm(cp.x - x)) for cp in others), others


def _departure_sign(scenario: Scenario, fold: FoldPoint, h: float) -> int:
    e = scenario.energy
    push = []
    for sigma in (1, -1):
        d = sigma * fold.ell
        push.append(-float(e.gradient(fold.t, fold.x + h * d) @ d))
    out = [p > 0 for p in push]
    if all(out):
        raise FastDynamicsError(
            "both directions along the kernel descend away from the fold: "
            "kernel not simple or fold misidentified upstream"
        )
    if not any(out):
        raise FastDynamicsError("no descent direction away from the fold along the kernel")
    return 1 if out[0] else -1


def _seed_correction(scenario: Scenario, fold: FoldPoint, seed: np.ndarray) -> np.ndarray:
    """Quadratic center-manifold correction of the seed in the transverse block."""
    h = scenario.energy.hessian(fold.t, fold.x)
    w, vecs = jacobi_eigh(h)
    k = int(np.argmin(np.abs(w)))
    g = scenario.energy.gradient(fold.t, seed)
    corr = np.zeros_like(seed)
    for j in range(len(w)):
        if j != k:
            corr -= (vecs[:, j] @ g) / w[j] * vecs[:, j]
    return seed + corr


def _integrate_to_landing(scenario: Scenario, t: float, x0: np.ndarray, tol: Tolerances,
                          start_gate: np.ndarray | None = None, gate_radius: float = 0.0):
    e = scenario.energy

    def rhs(_s, v):
        return -e.gradient(t, v)

    def landed(_s, v):
        if start_gate is not None and np.linalg.norm(v - start_gate) <= gate_radius:
            return 1.0
        return float(np.linalg.norm(e.gradient(t, v))) - tol.land_grad_tol

    landed.terminal = True
    landed.direction = -1
    # local target a decade below fast_ode_tol keeps the accumulated error inside it
    sol = solve_ivp(
        rhs,
        (0.0, tol.s_budget),
        x0,
        method="DOP853",
        rtol=0.1 * tol.fast_ode_tol,
        atol=1e-3 * tol.fast_ode_tol,
        dense_output=True,
        events=landed,
    )
    if sol.status != 1:
        raise FastDynamicsError(
            f"gradient flow at t={t} did not land within s_budget={tol.s_budget:g} "
            f"(near-degenerate slow passage?)"
        )
    return sol


def heteroclinic_from_fold(scenario: Scenario, fold: FoldPoint, tol: Tolerances = DEFAULT,
                           delta: float | None = None, seed_offset: float | None = None,
                           second_order_seed: bool = False) -> Heteroclinic:
    """The heteroclinic of the frozen-time flow that leaves the fold point."""
    Lam, _ = other_critical_distance(scenario, fold.t, fold.x, tol)
    if not math.isfinite(Lam):
        raise FastDynamicsError("fold is the only critical point: nowhere to land")
    h0 = seed_offset if seed_offset is not None else tol.seed_offset * Lam
    sigma = _departure_sign(scenario, fold, h0)
    ell = sigma * fold.ell
    c = sigma * fold.c
    seed = fold.x + h0 * ell
    if second_order_seed:
        seed = _seed_correction(scenario, fold, seed)
    sol = _integrate_to_landing(scenario, fold.t, seed, tol, start_gate=fold.x, gate_radius=0.5 * Lam)
    x_end = sol.y[:, -1]
    w_inf = newton_at(scenario, fold.t, x_end, tol.newton_tol)
    if w_inf is None:
        raise FastDynamicsError("Newton polish of the landing point failed")
    cp = classify(scenario, fold.t, w_inf, tol)
    if cp.kind == "degenerate":
        raise FastDynamicsError(f"heteroclinic lands on a degenerate critical point {w_inf}")
    # prepend the algebraic departure tail down to depart_tol from the fold point
    z = np.geomspace(tol.depart_tol, h0, 41)[:-1]
    u0 = 2.0 / (abs(c) * h0)
    u_tail = u0 - 2.0 / (abs(c) * z)
    het = Heteroclinic(
        tau=fold.t,
        xi=np.asarray(fold.x, dtype=float),
        ell=ell,
        c=c,
        s=np.concatenate([u_tail, sol.t]),
        v=np.vstack([fold.x + z[:, None] * ell, sol.y.T]),
        w_inf=w_inf,
        phase="seed",
        delta_anchor=None,
        shift=0.0,
        seed_offset=h0,
        Lambda=Lam,
        dense=sol.sol,
    )
    if delta is None:
        delta = default_delta(het)
    return canonical_phase(het, delta)


def default_delta(het: Heteroclinic) -> float:
    return min(0.1 * het.Lambda, 0.5 * float(np.linalg.norm(het.w_inf - het.xi)))


def canonical_phase(het: Heteroclinic, delta: float) -> Heteroclinic:
    """Shift time so that s = 0 is the first crossing of the sphere |v - xi| = delta."""
    jump = float(np.linalg.norm(het.w_inf - het.xi))
    if not 0 < delta < jump or delta >= het.Lambda:
        raise ValueError(f"delta={delta} must lie in (0, min(|w_inf - xi|, Lambda))")
    dist = np.linalg.norm(het.v - het.xi, axis=1)
    if dist[0] >= delta:
        raise FastDynamicsError(f"seed already outside B(xi, {delta}); lower the seed offset")
    k = int(np.argmax(dist >= delta))
    if dist[k] < delta:
        raise FastDynamicsError(f"trajectory never exits B(xi, {delta})")
    u_lo = het.s[k - 1] + het.shift
    u_hi = het.s[k] + het.shift

    def excess(u):
        return float(np.linalg.norm(het(u - het.shift) - het.xi)) - delta

    u_cross = brentq(excess, u_lo, u_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    return dataclasses.replace(
        het,
        s=het.s + het.shift - u_cross,
        shift=u_cross,
        phase="first-crossing",
        delta_anchor=float(delta),
    )


def omega_limit(scenario: Scenario, t: float, x0, tol: Tolerances = DEFAULT) -> CriticalPoint:
    """Equilibrium reached by the gradient flow of f(t, .) from ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    e = scenario.energy
    if np.linalg.norm(e.gradient(t, x0)) >= tol.land_grad_tol:
        x0 = _integrate_to_landing(scenario, t, x0, tol).y[:, -1]
    x = newton_at(scenario, t, x0, tol.newton_tol)
    if x is None:
        raise FastDynamicsError(f"Newton polish of the omega-limit near {x0} failed")
    return classify(scenario, t, x, tol)


@dataclass
class LandingReport:
    passed: bool
    lambda_min: float
    eigvals: np.ndarray

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def check_landing(scenario: Scenario, het: Heteroclinic, tol: Tolerances = DEFAULT) -> LandingReport:
    """The landing point must be a nondegenerate minimum of f(tau, .)."""
    h = scenario.energy.hessian(het.tau, het.w_inf)
    w = jacobi_eigh(h)[0]
    dtol = tol.degeneracy_tol * max(1.0, float(np.abs(w).max()))
    return LandingReport(bool(w[0] > dtol), float(w[0]), w)


# ------------------------------------------------------------------ diagnostics


def energy_along(scenario: Scenario, het: Heteroclinic) -> np.ndarray:
    return scenario.energy.value_many(het.tau, het.v)


def energy_drop_check(scenario: Scenario, het: Heteroclinic, nodes: int = 5) -> tuple[float, float]:
    """(f(xi) - f(w_inf), int |grad f(v)|^2 ds) with Gauss-Legendre on every integrator step.

    The algebraic tail before the seed contributes its exact energy difference.
    """
    e = scenario.energy
    t = het.tau
    g, w = np.polynomial.legendre.leggauss(nodes)
    seed_s = -het.shift
    k0 = int(np.searchsorted(het.s, seed_s - 1e-12 * max(1.0, abs(seed_s))))
    ss = het.s[k0:]
    a, b = ss[:-1], ss[1:]
    nodes_s = (0.5 * (b - a))[:, None] * g[None, :] + (0.5 * (a + b))[:, None]
    vs = het(nodes_s.ravel())
    grads = e.gradient_many(t, vs)
    q = np.sum(grads * grads, axis=1).reshape(nodes_s.shape)
    integral = float(np.sum(0.5 * (b - a) * (q @ w)))
    integral += e.value(t, het.xi) - e.value(t, het.v[k0])
    integral += e.value(t, het.v[-1]) - e.value(t, het.w_inf)
    return e.value(t, het.xi) - e.value(t, het.w_inf), integral


def translation_defect(scenario: Scenario, het: Heteroclinic, s0: float, tol: Tolerances = DEFAULT) -> float:
    """sup |w(s - s0) - v(s)| over the sampled tail, where w restarts the flow from v(s0)."""
    e = scenario.energy
    tail = het.s[het.s >= s0]
    sol = solve_ivp(
        lambda _s, v: -e.gradient(het.tau, v),
        (0.0, tail[-1] - s0),
        het(s0),
        method="DOP853",
        rtol=0.1 * tol.fast_ode_tol,
        atol=1e-3 * tol.fast_ode_tol,
        t_eval=tail - s0,
    )
    return float(np.abs(sol.y.T - het(tail)).max())


def backward_tail_slope(het: Heteroclinic, s_lo: float = 10.0, s_hi: float = 100.0, count: int = 50) -> float:
    """Log-log slope of |v(-s) - xi| against s on [s_lo, s_hi]."""
    s = np.geomspace(s_lo, s_hi, count)
    d = np.linalg.norm(het(-s) - het.xi, axis=1)
    return float(np.polyfit(np.log(s), np.log(d), 1)[0])


def forward_tail_rate(het: Heteroclinic, d_hi: float = 1e-2, d_lo: float = 1e-6) -> float:
    """Exponential decay rate of |v(s) - w_inf| while it falls from d_hi to d_lo."""
    d = np.linalg.norm(het.v - het.w_inf, axis=1)
    far = np.flatnonzero(d >= d_hi)
    start = het.s[far[-1]] if len(far) else het.s[0]
    near = np.flatnonzero((d <= d_lo) & (het.s > start))
    stop = het.s[near[0]] if len(near) else het.s[-1]
    s = np.linspace(start, stop, 200)
    dd = np.linalg.norm(het(s) - het.w_inf, axis=1)
    return float(-np.polyfit(s, np.log(dd), 1)[0])


def sample_curve(het: Heteroclinic, max_gap: float) -> np.ndarray:
    """Points of the orbit (plus xi and w_inf) with consecutive gaps <= max_gap."""
    pts = [het.xi[None, :]]
    v = het.v
    for a, b, sa, sb in zip(v[:-1], v[1:], het.s[:-1], het.s[1:]):
        k = max(1, int(math.ceil(np.linalg.norm(b - a) / max_gap)))
        if k == 1:
            pts.append(a[None, :])
            continue
        # the orbit is not uniform in s; refine until every chord fits
        while True:
            seg = het(np.linspace(sa, sb, k + 1))
            if np.linalg.norm(np.diff(seg, axis=0), axis=1).max() <= max_gap:
                break
            k *= 2
        pts.append(seg[:-1])
    pts.append(v[-1:])
    pts.append(het.w_inf[None, :])
    return np.vstack(pts)
