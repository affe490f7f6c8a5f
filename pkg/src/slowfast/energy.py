"""Time-dependent energies f(t, x): scenarios, exact derivatives, coercivity.

An :class:`Energy` differentiates its expression once, symbolically, and
compiles each derivative family into a plain Python function. Everything
downstream (Newton solves, continuation, both integrators) evaluates through
these compiled functions; nothing is obtained by numerical differencing.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import expr as ex
from .expr import Expr, differentiate, parse_energy

__all__ = [
    "BUILTIN_SCENARIOS",
    "CoercivityReport",
    "DerivativeBundle",
    "Energy",
    "Scenario",
    "ScenarioError",
    "builtin_scenario",
    "check_coercivity",
    "eval_bundle",
    "load_scenario",
    "parse_scenario_text",
    "scenario_to_text",
]


class ScenarioError(ValueError):
    """Malformed scenario file or invalid scenario data."""


def _xs(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


class Energy:
    """Compiled derivative cache for one expression in ``n`` space variables."""

    def __init__(self, expr: Expr, n: int):
        self.expr = expr
        self.n = n
        xs = _xs(n)
        self.grad_exprs = [differentiate(expr, v) for v in xs]
        self.hess_index = [(i, j) for i in range(n) for j in range(i, n)]
        self.hess_exprs = [differentiate(self.grad_exprs[i], xs[j]) for i, j in self.hess_index]
        self.grad_t_exprs = [differentiate(g, "t") for g in self.grad_exprs]
        self.f_t_expr = differentiate(expr, "t")

        self._f = ex.compile_many([expr], n)
        self._grad = ex.compile_many(self.grad_exprs, n)
        self._hess = ex.compile_many(self.hess_exprs, n)
        self._grad_t = ex.compile_many(self.grad_t_exprs, n)
        self._f_t = ex.compile_many([self.f_t_expr], n)
        iu = np.array(self.hess_index, dtype=int).reshape(-1, 2)
        self._iu = (iu[:, 0], iu[:, 1])

    # -- lazily built higher derivatives -------------------------------------

    @cached_property
    def third_index(self) -> list[tuple[int, int, int]]:
        n = self.n
        return [(i, j, k) for i in range(n) for j in range(i, n) for k in range(j, n)]

    @cached_property
    def _third(self):
        xs = _xs(self.n)
        lookup = dict(zip(self.hess_index, self.hess_exprs))
        exprs = [differentiate(lookup[(i, j)], xs[k]) for i, j, k in self.third_index]
        return ex.compile_many(exprs, self.n)

    @cached_property
    def _hess_t(self):
        return ex.compile_many([differentiate(h, "t") for h in self.hess_exprs], self.n)

    @cached_property
    def _f_tt(self):
        return ex.compile_many([differentiate(self.f_t_expr, "t")], self.n)

    @cached_property
    def _vec_grad(self):
        return ex.compile_many(self.grad_exprs, self.n, vectorized=True)

    @cached_property
    def _vec_hess(self):
        return ex.compile_many(self.hess_exprs, self.n, vectorized=True)

    @cached_property
    def _vec_f(self):
        return ex.compile_many([self.expr], self.n, vectorized=True)

    # -- scalar evaluation ---------------------------------------------------

    def _call(self, fn, exprs, t, x):
        try:
            out = fn(float(t), *(float(v) for v in x))
        except (OverflowError, ZeroDivisionError):
            out = None
        if out is None or not all(math.isfinite(v) for v in out):
            for e in exprs:
                ex.evaluate(e, float(t), list(x))  # raises with the culprit
            raise ex.EvaluationError(exprs[0])
        return out

    def value(self, t: float, x) -> float:
        return self._call(self._f, [self.expr], t, x)[0]

    def gradient(self, t: float, x) -> np.ndarray:
        return np.array(self._call(self._grad, self.grad_exprs, t, x))

    def hessian(self, t: float, x) -> np.ndarray:
        vals = self._call(self._hess, self.hess_exprs, t, x)
        return self._symmetric(vals)

    def grad_t(self, t: float, x) -> np.ndarray:
        return np.array(self._call(self._grad_t, self.grad_t_exprs, t, x))

    def f_t(self, t: float, x) -> float:
        return self._call(self._f_t, [self.f_t_expr], t, x)[0]

    def f_tt(self, t: float, x) -> float:
        return self._f_tt(float(t), *(float(v) for v in x))[0]

    def hess_t(self, t: float, x) -> np.ndarray:
        return self._symmetric(self._hess_t(float(t), *(float(v) for v in x)))

    def third_tensor(self, t: float, x) -> np.ndarray:
        vals = self._third(float(t), *(float(v) for v in x))
        n = self.n
        out = np.empty((n, n, n))
        for (i, j, k), v in zip(self.third_index, vals):
            for p in set(itertools.permutations((i, j, k))):
                out[p] = v
        return out

    def cubic_form(self, t: float, x, ell) -> float:
        ell = np.asarray(ell, dtype=float)
        return float(np.einsum("ijk,i,j,k->", self.third_tensor(t, x), ell, ell, ell))

    def _symmetric(self, vals) -> np.ndarray:
        n = self.n
        h = np.empty((n, n))
        h[self._iu] = vals
        h.T[self._iu] = vals
        return h

    # -- batched evaluation (rows of ``xs``) -----------------------------------

    def gradient_many(self, t, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        t = np.broadcast_to(np.asarray(t, dtype=float), xs.shape[:1])
        out = self._vec_grad(t, *xs.T)
        return np.stack(out, axis=-1)

    def hessian_many(self, t, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        t = np.broadcast_to(np.asarray(t, dtype=float), xs.shape[:1])
        vals = np.stack(self._vec_hess(t, *xs.T), axis=-1)
        n = self.n
        h = np.empty((xs.shape[0], n, n))
        h[:, self._iu[0], self._iu[1]] = vals
        h[:, self._iu[1], self._iu[0]] = vals
        return h

    def value_many(self, t, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        t = np.broadcast_to(np.asarray(t, dtype=float), xs.shape[:1])
        return self._vec_f(t, *xs.T)[0]


@dataclass(frozen=True)
class Scenario:
    name: str
    n: int
    T: float
    expr: Expr
    c0: float
    a0: float
    y0: tuple[float, ...]
    eps_ladder: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if not 1 <= self.n <= 8:
            raise ScenarioError(f"n must be in 1..8, got {self.n}")
        if not self.T > 0:
            raise ScenarioError(f"T must be positive, got {self.T}")
        if not self.c0 > 0:
            raise ScenarioError(f"c0 must be positive, got {self.c0}")
        if not self.a0 >= 0:
            raise ScenarioError(f"a0 must be nonnegative, got {self.a0}")
        if len(self.y0) != self.n:
            raise ScenarioError(f"y0 has {len(self.y0)} entries, expected {self.n}")
        ladder = self.eps_ladder
        if any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ScenarioError("eps ladder must be positive and strictly decreasing")
        unknown = {v for v in ex.variables(self.expr) if v != "t" and int(v[1:]) > self.n}
        if unknown:
            raise ScenarioError(f"expression uses {sorted(unknown)} but n={self.n}")

    @cached_property
    def energy(self) -> Energy:
        return Energy(self.expr, self.n)

    @property
    def ball_radius(self) -> float:
        """Radius of the ball that contains every critical point."""
        return math.sqrt(self.a0 / self.c0)

    @property
    def text(self) -> str:
        return ex.to_text(self.expr)

    def y0_status(self, tol: float = 1e-8) -> tuple[bool, float, float]:
        """(ok, |grad f(0,y0)|, lambda_min of the Hessian at (0, y0))."""
        g = float(np.linalg.norm(self.energy.gradient(0.0, self.y0)))
        lam = float(np.linalg.eigvalsh(self.energy.hessian(0.0, self.y0))[0])
        scale = max(1.0, float(np.abs(self.energy.hessian(0.0, self.y0)).max()))
        return (g <= tol * scale and lam > 1e-6 * scale), g, lam

    def validate_y0(self, tol: float = 1e-8) -> None:
        ok, g, lam = self.y0_status(tol)
        if not ok:
            raise ScenarioError(
                f"y0={list(self.y0)} is not a nondegenerate minimum of f(0,.): "
                f"|grad|={g:.3e}, lambda_min={lam:.3e}"
            )

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("energy", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


# ------------------------------------------------------------------ bundles


@dataclass(frozen=True)
class DerivativeBundle:
    t: float
    x: np.ndarray
    f: float
    grad: np.ndarray
    hess: np.ndarray
    grad_t: np.ndarray
    f_t: float
    third_tensor: np.ndarray

    def third(self, ell) -> float:
        """Cubic form sum_ijk f_{x_i x_j x_k} l_i l_j l_k."""
        ell = np.asarray(ell, dtype=float)
        return float(np.einsum("ijk,i,j,k->", self.third_tensor, ell, ell, ell))


def eval_bundle(scenario: Scenario, t: float, x) -> DerivativeBundle:
    """All derivatives of f at (t, x), from the symbolic cache."""
    if not 0.0 <= t <= scenario.T:
        raise ValueError(f"t={t} outside [0, {scenario.T}]")
    e = scenario.energy
    x = np.asarray(x, dtype=float).reshape(scenario.n)
    return DerivativeBundle(
        t=float(t),
        x=x,
        f=e.value(t, x),
        grad=e.gradient(t, x),
        hess=e.hessian(t, x),
        grad_t=e.grad_t(t, x),
        f_t=e.f_t(t, x),
        third_tensor=e.third_tensor(t, x),
    )


# --------------------------------------------------------------- coercivity


@dataclass
class CoercivityReport:
    passed: bool
    min_margin: float
    argmin: tuple[float, np.ndarray]
    radius: float
    ball_radius: float
    samples: int
    polynomial_certified: bool
    # fitted, uncertified lower-bound constants: f >= c_tilde |x|^2 - a_tilde for |x| >= M
    M: float
    c_tilde: float
    a_tilde: float

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def _sphere_directions(n: int, count: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    from scipy.stats import qmc

    u = qmc.Halton(d=n, scramble=False).random(count + 1)[1:]
    from scipy.special import ndtri

    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    # axis directions make the sampled set sign-symmetric on coordinate axes
    axes = np.vstack([np.eye(n), -np.eye(n)])
    return np.vstack([axes, g])


def check_coercivity(
    scenario: Scenario,
    radius: float | None = None,
    n_times: int = 21,
    n_radii: int = 41,
    n_directions: int = 64,
) -> CoercivityReport:
    """Sample grad f(t,x).x - c0|x|^2 + a0 over [0,T] x B(0,R)."""
    ball = scenario.ball_radius
    R = radius if radius is not None else max(2.0 * ball, 1.0) * 2.0
    if R < 2.0 * ball:
        raise ValueError(f"radius {R} below 2*sqrt(a0/c0)={2 * ball}")
    n = scenario.n
    dirs = _sphere_directions(n, n_directions)
    radii = np.linspace(0.0, R, n_radii)
    pts = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, n)
    pts = np.unique(np.round(pts, 15), axis=0)
    times = np.linspace(0.0, scenario.T, n_times)
    e = scenario.energy
    best = (math.inf, (0.0, pts[0]))
    M = R / 2.0
    c_tilde = scenario.c0 / 4.0
    a_tilde = -math.inf
    r2 = np.einsum("ij,ij->i", pts, pts)
    far = r2 >= M * M
    for t in times:
        g = e.gradient_many(t, pts)
        margin = np.einsum("ij,ij->i", g, pts) - scenario.c0 * r2 + scenario.a0
        k = int(np.argmin(margin))
        if margin[k] < best[0]:
            best = (float(margin[k]), (float(t), pts[k].copy()))
        if far.any():
            fv = e.value_many(t, pts[far])
            a_tilde = max(a_tilde, float(np.max(c_tilde * r2[far] - fv)))
    return CoercivityReport(
        passed=best[0] >= 0.0,
        min_margin=best[0],
        argmin=best[1],
        radius=R,
        ball_radius=ball,
        samples=len(pts) * len(times),
        polynomial_certified=polynomial_certified(scenario.expr, n),
        M=M,
        c_tilde=c_tilde,
        a_tilde=a_tilde,
    )


def as_polynomial(e: Expr, n: int) -> dict[tuple[int, ...], float] | None:
    """Monomial map (deg_t, deg_x1, ..., deg_xn) -> coefficient, or None."""
    if isinstance(e, ex.Num):
        return {(0,) * (n + 1): e.value}
    if isinstance(e, ex.Var):
        k = 0 if e.name == "t" else int(e.name[1:])
        key = [0] * (n + 1)
        key[k] = 1
        return {tuple(key): 1.0}
    if isinstance(e, ex.Func):
        return None
    if isinstance(e, ex.Neg):
        p = as_polynomial(e.arg, n)
        return None if p is None else {k: -v for k, v in p.items()}
    if isinstance(e, ex.Pow):
        p = as_polynomial(e.base, n)
        if p is None:
            return None
        if e.exponent < 0:
            if len(p) == 1 and (0,) * (n + 1) in p:
                return {(0,) * (n + 1): p[(0,) * (n + 1)] ** e.exponent}
            return None
        out = {(0,) * (n + 1): 1.0}
        for _ in range(e.exponent):
            out = _poly_mul(out, p)
        return out
    a = as_polynomial(e.left, n)
    b = as_polynomial(e.right, n)
    if a is None or b is None:
        return None
    if isinstance(e, ex.Add):
        return _poly_add(a, b, 1.0)
    if isinstance(e, ex.Sub):
        return _poly_add(a, b, -1.0)
    if isinstance(e, ex.Mul):
        return _poly_mul(a, b)
    c = b.get((0,) * (n + 1), 0.0)
    return {k: v / c for k, v in a.items()}


def _poly_add(a, b, sign):
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + sign * v
    return {k: v for k, v in out.items() if v != 0.0}


def _poly_mul(a, b):
    out: dict = {}
    for ka, va in a.items():
        for kb, vb in b.items():
            k = tuple(i + j for i, j in zip(ka, kb))
            out[k] = out.get(k, 0.0) + va * vb
    return {k: v for k, v in out.items() if v != 0.0}


def polynomial_certified(e: Expr, n: int) -> bool:
    """Leading-degree check: in every variable the highest power is even and
    carried only by a pure, time-independent monomial with positive coefficient."""
    p = as_polynomial(e, n)
    if p is None:
        return False
    for i in range(1, n + 1):
        top = max((k[i] for k in p), default=0)
        if top < 2 or top % 2:
            return False
        carriers = [(k, v) for k, v in p.items() if k[i] == top]
        if len(carriers) != 1:
            return False
        k, v = carriers[0]
        if v <= 0 or sum(k) != top:
            return False
    return True


# ---------------------------------------------------------------- scenarios


def _make(name, n, T, text, c0, a0, y0, eps=(1e-2, 1e-3, 1e-4)) -> Scenario:
    return Scenario(
        name=name,
        n=n,
        T=T,
        expr=parse_energy(text, n),
        c0=c0,
        a0=a0,
        y0=tuple(float(v) for v in y0),
        eps_ladder=tuple(eps),
        source=text,
    )


_DWELL = "x1^4/4 - x1^2/2 - t*x1"

BUILTIN_SCENARIOS = {
    "quadratic": lambda: _make("quadratic", 1, 1.0, "x1^2/2", 1.0, 0.0, [0.0], (1e-1, 1e-2, 1e-3)),
    "tracking": lambda: _make(
        "tracking", 2, 1.0, "(x1 - t)^2/2 + x2^2/2", 0.5, 0.6, [0.0, 0.0], (1e-2, 1e-3, 1e-4)
    ),
    "dwell": lambda: _make("dwell", 1, 0.6, _DWELL, 0.5, 2.0, [-1.0]),
    "dwell2d": lambda: _make("dwell2d", 2, 0.6, _DWELL + " + x2^2/2", 0.5, 2.0, [-1.0, 0.0]),
    # tilt 0.6 sin(t) crosses the fold level three times on [0, 8]
    "dwell_cycle": lambda: _make(
        "dwell_cycle", 1, 8.0, "x1^4/4 - x1^2/2 - 0.6*sin(t)*x1", 0.5, 2.0, [-1.0]
    ),
    # heteroclinic lands on (2/sqrt3, 0), a saddle: violates the landing assumption
    "saddle_landing": lambda: _make(
        "saddle_landing",
        2,
        0.6,
        _DWELL + " + (0.2 - x1)*x2^2/2 + x2^4/4",
        0.5,
        4.0,
        [-1.0, 0.0],
    ),
    # degenerate point at t=0, x=0 with vanishing cubic coefficient
    "cubic_degenerate": lambda: _make("cubic_degenerate", 1, 1.0, "x1^4/4 - t*x1", 0.5, 2.0, [0.0]),
}


def builtin_scenario(name: str) -> Scenario:
    try:
        return BUILTIN_SCENARIOS[name]()
    except KeyError:
        raise ScenarioError(f"no built-in scenario {name!r}") from None


_KEYS = ("name", "n", "T", "f", "c0", "a0", "y0", "eps")
_REQUIRED = ("name", "n", "T", "f", "c0", "a0", "y0")


def parse_scenario_text(text: str, origin: str = "<string>") -> Scenario:
    """Read the line-oriented ``key = value`` scenario format."""
    values: dict[str, tuple[str, int, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if "=" not in line:
            raise ScenarioError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _KEYS:
            raise ScenarioError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ScenarioError(f"{origin}:{lineno}: duplicate key {key!r}")
        col = raw.index("=") + 2 + (len(value) - len(value.lstrip()))
        values[key] = (value.strip(), lineno, col)
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ScenarioError(f"{origin}: missing keys {missing}")

    def num(key, conv=float):
        v, lineno, _ = values[key]
        try:
            return conv(v)
        except ValueError:
            raise ScenarioError(f"{origin}:{lineno}: bad value for {key}: {v!r}") from None

    def vec(key):
        v, lineno, _ = values[key]
        try:
            return tuple(float(p) for p in re.split(r"\s*,\s*", v) if p)
        except ValueError:
            raise ScenarioError(f"{origin}:{lineno}: bad list for {key}: {v!r}") from None

    n = num("n", int)
    f_text, f_line, f_col = values["f"]
    try:
        expr = parse_energy(f_text, n)
    except ex.ExpressionError as err:
        col = None if err.column is None else err.column + f_col - 1
        raise ScenarioError(
            f"{origin}:{f_line}:{col}: in f: {str(err).split(' (line')[0]}"
        ) from err
    kwargs = {}
    if "eps" in values:
        kwargs["eps_ladder"] = vec("eps")
    return Scenario(
        name=values["name"][0],
        n=n,
        T=num("T"),
        expr=expr,
        c0=num("c0"),
        a0=num("a0"),
        y0=vec("y0"),
        source=f_text,
        **kwargs,
    )


def scenario_to_text(s: Scenario) -> str:
    fmt = lambda v: format(v, ".17g")  # noqa: E731
    lines = [
        f"name = {s.name}",
        f"n = {s.n}",
        f"T = {fmt(s.T)}",
        f"f = {s.source or s.text}",
        f"c0 = {fmt(s.c0)}",
        f"a0 = {fmt(s.a0)}",
        f"y0 = {', '.join(fmt(v) for v in s.y0)}",
        f"eps = {', '.join(fmt(v) for v in s.eps_ladder)}",
    ]
    return "\n".join(lines) + "\n"


def load_scenario(where: str | Path) -> Scenario:
    """Load a scenario from a file path, or a built-in by name."""
    path = Path(where)
    if path.is_file():
        return parse_scenario_text(path.read_text(), str(path))
    if str(where) in BUILTIN_SCENARIOS:
        return builtin_scenario(str(where))
    raise ScenarioError(f"no scenario file or built-in named {str(where)!r}")
