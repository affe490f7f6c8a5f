import math

import numpy as np
import pytest

from slowfast.critical import AssumptionViolation
from slowfast.energy import builtin_scenario
from slowfast.slow import (
    BranchError,
    build_slow_fast_evolution,
    continue_branch,
    eval_u,
    right_geometry,
    sibling_branch,
)

from oracles import T1, X1, Y1, left_root, middle_root, right_root


def test_branch_samples_on_the_curve(dwell_pe):
    br = dwell_pe.branches[0]
    assert br.kind == "stable" and br.end_reason == "fold" and br.index == 0
    exact = np.array([left_root(t) for t in br.ts])
    assert np.abs(br.xs[:, 0] - exact).max() <= 1e-10
    assert br.t_end == pytest.approx(T1, abs=1e-14)


def test_eigenvalue_drops_towards_the_fold(dwell_pe):
    br = dwell_pe.branches[0]
    lam = br.lambda_min
    tail = lam[int(0.9 * len(lam)) :]
    assert np.all(np.diff(tail) < 0)
    assert 0 < lam[-1] <= br.tol.fold_trigger * lam[0]


def test_eval_u_matches_roots(dwell_pe):
    for t in np.linspace(0, 0.6, 61):
        exact = left_root(t) if t < T1 else right_root(t)
        assert eval_u(dwell_pe, t)[0] == pytest.approx(exact, abs=1e-9)


def test_eval_u_is_right_continuous(dwell_pe):
    assert eval_u(dwell_pe, T1)[0] == pytest.approx(Y1, abs=1e-12)
    assert eval_u(dwell_pe, T1 - 1e-12)[0] == pytest.approx(X1, abs=1e-5)


def test_eval_u_domain(dwell_pe):
    with pytest.raises(ValueError):
        eval_u(dwell_pe, -0.1)
    with pytest.raises(ValueError):
        eval_u(dwell_pe, 0.7)
    with pytest.raises(ValueError):
        dwell_pe.branches[0].evaluate(0.5)


def test_square_root_law(dwell_pe):
    gaps = np.geomspace(1e-6, 1e-4, 5)
    r = [abs(eval_u(dwell_pe, T1 - g)[0] - X1) / math.sqrt(g) for g in gaps]
    # |x - x1| ~ sqrt(2 b dt / c) = sqrt(1/sqrt3) near the fold
    assert max(r) / min(r) < 1.01
    assert r[0] == pytest.approx(3 ** -0.25, rel=1e-3)


def test_landing_consistency(dwell_pe):
    br = dwell_pe.branches[1]
    assert br.t_start == pytest.approx(T1) and br.end_reason == "reached_T"
    assert np.linalg.norm(eval_u(dwell_pe, T1) - dwell_pe.landing_points[0]) <= 1e-6


def test_sibling_branch(dwell, dwell_pe):
    fold = dwell_pe.folds[0]
    sib = sibling_branch(dwell, fold)
    assert sib.kind == "sibling" and sib.index == -1
    for t in np.linspace(sib.t_start, T1 - 1e-6, 15):
        assert sib.evaluate(t)[0] == pytest.approx(middle_root(t), abs=1e-8)
    h = 1e-9
    t = T1 - 1e-6
    slope = (sib.evaluate(t)[0] - sib.evaluate(t - h)[0]) / h
    assert abs(slope) > 1e2
    stable = dwell_pe.branches[0]
    assert abs(stable.evaluate(t)[0] - stable.evaluate(t - h)[0]) / h > 1e2


def test_sibling_needs_same_sign(dwell_pe, dwell):
    fold = dwell_pe.folds[0]
    bad = type(fold)(fold.t, fold.x, fold.ell, fold.b, -fold.c, fold.residuals, fold.eigvals)
    with pytest.raises(AssumptionViolation):
        sibling_branch(dwell, bad)


def test_right_geometry(dwell, dwell_pe):
    g = right_geometry(dwell, dwell_pe.folds[0], dwell_pe.heteroclinics[0])
    assert g.passed and g.r > 0 and g.R == pytest.approx(0.5 * math.sqrt(3))


def test_continue_branch_rejects_non_equilibrium(dwell):
    with pytest.raises(BranchError):
        continue_branch(dwell, 0.0, [-0.5])


def test_continue_branch_rejects_saddle(dwell):
    with pytest.raises(AssumptionViolation):
        continue_branch(dwell, 0.0, [0.0])


@pytest.mark.parametrize(
    "name, k",
    [("quadratic", 1), ("tracking", 1), ("dwell", 2), ("dwell2d", 2), ("dwell_cycle", 4)],
)
def test_number_of_branches(name, k):
    pe = build_slow_fast_evolution(builtin_scenario(name))
    assert pe.k == k
    assert len(pe.jump_times) == k - 1
    assert all(a < b for a, b in zip(pe.jump_times, pe.jump_times[1:]))


def test_cycle_jump_times():
    pe = build_slow_fast_evolution(builtin_scenario("dwell_cycle"))
    a = math.asin(T1 / 0.6)
    assert pe.jump_times == pytest.approx([a, math.pi + a, 2 * math.pi + a], abs=1e-10)
    assert [p[0] for p in pe.landing_points] == pytest.approx([Y1, -Y1, Y1], abs=1e-10)


def test_tracking_branch_is_exact():
    pe = build_slow_fast_evolution(builtin_scenario("tracking"))
    for t in np.linspace(0, 1, 11):
        assert eval_u(pe, t) == pytest.approx([t, 0.0], abs=1e-14)


def test_saddle_landing_rejected():
    with pytest.raises(AssumptionViolation, match="lambda_min"):
        build_slow_fast_evolution(builtin_scenario("saddle_landing"))


def test_degenerate_start_rejected():
    with pytest.raises(AssumptionViolation, match="not a nondegenerate minimum"):
        build_slow_fast_evolution(builtin_scenario("cubic_degenerate"))


def test_graph_polylines(dwell_pe):
    lines = dwell_pe.graph_polylines()
    assert len(lines) == 3
    jump = lines[2]
    assert np.all(jump[:, 0] == dwell_pe.jump_times[0])
    assert np.abs(np.diff(jump[:, 1])).max() <= 0.01 * 2 * math.sqrt(3) + 1e-12
    assert lines[0][-1, 1] == pytest.approx(X1)


def test_steps_refine_towards_fold(dwell_pe):
    br = dwell_pe.branches[0]
    h = np.diff(br.ts)
    assert h[-5:].max() < 0.1 * h[: len(h) // 2].max()


def test_eigenvalue_vanishes_at_fold(dwell, dwell_pe):
    x = dwell_pe.branches[0].evaluate(T1 - 1e-12)
    assert abs(dwell.energy.hessian(T1, x)[0, 0]) <= 1e-5


def test_limits_at_the_jump(dwell_pe):
    het = dwell_pe.heteroclinics[0]
    left = dwell_pe.branches[0].evaluate(T1 - 1e-14)
    assert np.linalg.norm(left - het(-1e9)) <= 1e-6
    assert np.linalg.norm(eval_u(dwell_pe, T1) - het(1e9)) <= 1e-6


def test_stationary_quadratic_branch():
    pe = build_slow_fast_evolution(builtin_scenario("quadratic"))
    br = pe.branches[0]
    assert br.end_reason == "reached_T" and np.all(br.xs == 0.0)


def test_initial_value_and_interior_point(dwell_pe):
    assert eval_u(dwell_pe, 0.0)[0] == -1.0
    # the root of x^3 - x = 0.2 on the left branch
    assert eval_u(dwell_pe, 0.2)[0] == pytest.approx(-0.87888506624997287, abs=1e-12)


def test_sibling_is_planar_in_2d():
    s = builtin_scenario("dwell2d")
    pe = build_slow_fast_evolution(s)
    sib = sibling_branch(s, pe.folds[0])
    assert np.abs(sib.xs[:, 1]).max() <= 1e-14
