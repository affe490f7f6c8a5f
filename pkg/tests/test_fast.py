import math

import numpy as np
import pytest

from slowfast.config import DEFAULT
from slowfast.critical import refine_fold
from slowfast.energy import builtin_scenario
from slowfast.fast import (
    backward_tail_slope,
    canonical_phase,
    check_landing,
    default_delta,
    energy_along,
    energy_drop_check,
    forward_tail_rate,
    heteroclinic_from_fold,
    omega_limit,
    sample_curve,
    translation_defect,
)

from oracles import C1, T1, X1, Y1


def test_endpoints_and_orientation(dwell_het):
    h = dwell_het
    assert h.tau == pytest.approx(T1, abs=1e-14)
    assert h.xi[0] == pytest.approx(X1, abs=1e-14)
    assert h.w_inf[0] == pytest.approx(Y1, abs=1e-14)
    assert h.ell[0] == 1.0 and h.c == pytest.approx(C1)
    assert h.Lambda == pytest.approx(Y1 - X1)
    assert h.phase == "first-crossing"


def test_phase_anchor(dwell_het):
    h = dwell_het
    assert h.delta_anchor == pytest.approx(default_delta(h))
    assert np.linalg.norm(h(0.0) - h.xi) == pytest.approx(h.delta_anchor, abs=1e-12)
    # first crossing: strictly inside for s < 0
    s = np.linspace(h.s_min, -1e-6, 200)
    assert np.all(np.linalg.norm(h(s) - h.xi, axis=1) < h.delta_anchor)


def test_canonical_phase_idempotent(dwell_het):
    h = dwell_het
    again = canonical_phase(h, h.delta_anchor)
    assert abs(again.shift - h.shift) <= 1e-12 * max(1.0, abs(h.shift))
    tenth = canonical_phase(h, 0.1)
    assert np.linalg.norm(tenth(0.0) - h.xi) == pytest.approx(0.1, abs=1e-12)
    s = tenth.s[tenth.s < 0]
    assert np.all(np.linalg.norm(tenth(s) - h.xi, axis=1) < 0.1)
    other = canonical_phase(h, 0.5)
    assert np.linalg.norm(other(0.0) - h.xi) == pytest.approx(0.5, abs=1e-12)
    back = canonical_phase(other, h.delta_anchor)
    assert abs(back.shift - h.shift) <= 1e-9


@pytest.mark.parametrize("delta", [0.0, -0.1, 2.0])
def test_canonical_phase_rejects_bad_radius(dwell_het, delta):
    with pytest.raises(ValueError):
        canonical_phase(dwell_het, delta)


@pytest.mark.parametrize("s0", [-2.0, 0.0, 3.0, 10.0])
def test_translation_invariance(dwell, dwell_het, s0):
    assert translation_defect(dwell, dwell_het, s0) <= 10 * DEFAULT.fast_ode_tol


def test_algebraic_tail(dwell_het):
    h = dwell_het
    # |v(-s) - xi| ~ 2 / (|c| s) for large s
    for s in (1e4, 1e5, 1e6):
        d = np.linalg.norm(h(-s) - h.xi)
        assert d * 0.5 * abs(h.c) * s == pytest.approx(1.0, rel=2e-2)
    assert backward_tail_slope(h, 10.0, 100.0) == pytest.approx(-1.0, abs=0.1)
    assert backward_tail_slope(h, 1e3, 1e4) == pytest.approx(-1.0, abs=0.01)


def test_tail_joins_integrated_orbit(dwell_het):
    h = dwell_het
    u = -h.shift  # seed in the current phase
    left, right = h(u - 1e-9), h(u + 1e-9)
    assert np.linalg.norm(left - right) <= 1e-12


def test_samples_reach_depart_tol(dwell_het):
    d = np.linalg.norm(dwell_het.v - dwell_het.xi, axis=1)
    assert d[0] == pytest.approx(DEFAULT.depart_tol)
    assert np.linalg.norm(dwell_het.v[-1] - dwell_het.w_inf) <= DEFAULT.land_tol


def test_forward_rate(dwell_het):
    assert forward_tail_rate(dwell_het) == pytest.approx(3 * Y1**2 - 1, rel=0.01)


def test_energy_nonincreasing_along_samples(dwell, dwell_het):
    f = energy_along(dwell, dwell_het)
    assert np.all(np.diff(f) <= 4 * np.spacing(np.abs(f).max()))


def test_energy_drop_matches_dissipation(dwell, dwell_het):
    drop, integral = energy_drop_check(dwell, dwell_het)
    assert drop == pytest.approx(integral, abs=1e-10)
    # closed form f(x1) - f(y1) at t = t1
    f = lambda x: x**4 / 4 - x**2 / 2 - T1 * x  # noqa: E731
    assert drop == pytest.approx(f(X1) - f(Y1), abs=1e-14)


def test_seed_options_agree(dwell, dwell_het):
    fold = refine_fold(dwell, 0.38, [-0.58])
    for kw in ({"seed_offset": 0.5 * dwell_het.seed_offset}, {"second_order_seed": True}):
        other = heteroclinic_from_fold(dwell, fold, **kw)
        s = np.linspace(-5, 30, 701)
        assert np.abs(other(s) - dwell_het(s)).max() <= 1e-9


def test_two_dimensional_orbit_stays_on_axis():
    s = builtin_scenario("dwell2d")
    fold = refine_fold(s, 0.38, [-0.58, 0.0])
    h = heteroclinic_from_fold(s, fold)
    assert np.abs(h.v[:, 1]).max() <= 1e-14
    assert h.w_inf == pytest.approx([Y1, 0.0], abs=1e-12)


def test_landing():
    d = builtin_scenario("dwell")
    hd = heteroclinic_from_fold(d, refine_fold(d, 0.38, [-0.58]))
    rep = check_landing(d, hd)
    assert rep.passed and rep.lambda_min == pytest.approx(3 * Y1**2 - 1)
    s = builtin_scenario("saddle_landing")
    hs = heteroclinic_from_fold(s, refine_fold(s, 0.38, [-0.58, 0.0]))
    rep = check_landing(s, hs)
    assert not rep.passed and rep.verdict == "FAIL"
    assert hs.w_inf == pytest.approx([Y1, 0.0], abs=1e-10)


def test_omega_limit(dwell):
    assert omega_limit(dwell, 0.0, [0.5]).x[0] == pytest.approx(1.0, abs=1e-12)
    assert omega_limit(dwell, 0.0, [-0.5]).x[0] == pytest.approx(-1.0, abs=1e-12)
    cp = omega_limit(dwell, 0.0, [1.0])
    assert cp.kind == "min"


def test_sample_curve_gaps(dwell_het):
    pts = sample_curve(dwell_het, 0.01)
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert gaps.max() <= 0.01 + 1e-12
    assert pts[0] == pytest.approx(dwell_het.xi) and pts[-1] == pytest.approx(dwell_het.w_inf)
    assert math.isclose(pts[:, 0].min(), X1) and math.isclose(pts[:, 0].max(), Y1)


def test_omega_limit_of_a_minimum(dwell):
    cp = omega_limit(dwell, 0.2, [-0.87888506624997287])
    assert cp.x[0] == pytest.approx(-0.87888506624997287, abs=1e-15)


def test_landing_eigenvalues_in_2d():
    s = builtin_scenario("dwell2d")
    h = heteroclinic_from_fold(s, refine_fold(s, 0.38, [-0.58, 0.0]))
    rep = check_landing(s, h)
    assert rep.passed and rep.eigvals == pytest.approx([1.0, 3.0])
