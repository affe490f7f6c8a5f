import math

import numpy as np
import pytest

from slowfast.config import DEFAULT
from slowfast.energy import builtin_scenario
from slowfast.flow import (
    FlowError,
    a_priori_bound,
    dissipation_identity_residual,
    exit_time,
    integrate_eps_flow,
    last_entry_time,
)

from oracles import T1, right_root


@pytest.fixture(scope="module")
def quadratic():
    return builtin_scenario("quadratic")


@pytest.fixture(scope="module")
def decay(quadratic):
    return integrate_eps_flow(quadratic, 0.1, x_init=[1.0])


def test_exponential_decay(decay):
    assert decay.at(0.2)[0] == pytest.approx(math.exp(-2.0), abs=1e-6)
    t = np.linspace(0, 1, 101)
    assert np.abs(decay.at(t)[:, 0] - np.exp(-t / 0.1)).max() <= 1e-6
    assert decay.times[0] == 0.0 and decay.times[-1] == 1.0
    assert np.all(np.diff(decay.times) > 0)


def test_dense_output_hits_nodes(decay):
    assert np.array_equal(decay.at(decay.times[1:-1]), decay.states[1:-1])


def test_dissipation_closed_form(quadratic, decay):
    chk = dissipation_identity_residual(quadratic, decay)
    exact = 0.5 * (1 - math.exp(-2 * 1.0 / 0.1))
    assert chk.lhs == pytest.approx(exact, abs=1e-6)
    assert chk.rhs == pytest.approx(exact, abs=1e-12)
    assert abs(chk.residual) <= 1e-6
    run = decay.dissipation
    assert np.all(np.diff(run) >= 0) and run[-1] == pytest.approx(exact, abs=1e-5)


def test_default_start_and_perturbation(quadratic):
    tr = integrate_eps_flow(quadratic, 0.1)
    assert np.all(tr.states == 0.0)
    tp = integrate_eps_flow(quadratic, 0.1, perturb=[2.0])
    assert tp.x_init == pytest.approx([0.2])


def test_l_stability_large_steps(quadratic):
    # steps far beyond eps once the transient has decayed
    tr = integrate_eps_flow(quadratic, 1e-6, x_init=[1.0])
    assert tr.step_sizes.max() >= 1e3 * 1e-6
    assert abs(tr.states[-1, 0]) <= 1e-12
    assert tr.step_stats["newton_failures"] == 0


def test_tracking_lag():
    s = builtin_scenario("tracking")
    for eps in (1e-2, 1e-3):
        tr = integrate_eps_flow(s, eps)
        t = np.linspace(0.2, 1.0, 9)
        lag = t - tr.at(t)[:, 0]
        assert lag == pytest.approx(eps * (1 - np.exp(-t / eps)), rel=1e-4)
        assert np.abs(tr.states[:, 1]).max() == 0.0


def test_dwell_steps_adapt_to_the_jump(dwell):
    tr = integrate_eps_flow(dwell, 1e-3)
    assert tr.bound_violations == 0
    far = np.abs(tr.times - T1) > 0.1
    near = np.abs(tr.times - T1) < 0.05
    assert tr.step_sizes[far].max() >= 5e-3
    assert tr.step_sizes[near & (tr.step_sizes > 0)].min() <= 1e-3
    assert abs(dissipation_identity_residual(dwell, tr).residual) <= 1e-6


def test_a_priori_bound(dwell):
    assert a_priori_bound(dwell, [-1.0]) == pytest.approx(4.0)
    assert a_priori_bound(dwell, [3.0]) == pytest.approx(9.0)


@pytest.mark.parametrize("eps", [0.0, -1e-3])
def test_rejects_bad_eps(quadratic, eps):
    with pytest.raises(ValueError):
        integrate_eps_flow(quadratic, eps)


def test_rejects_non_finite_start(quadratic):
    with pytest.raises(ValueError):
        integrate_eps_flow(quadratic, 0.1, x_init=[math.nan])


def test_exit_and_last_entry(decay):
    eps = 0.1
    t_exit = exit_time(decay, [1.0], 0.5, 0.0)
    assert t_exit == pytest.approx(eps * math.log(2), abs=1e-7)
    t_last = last_entry_time(decay, [1.0], 0.5, 1.0)
    assert t_last == pytest.approx(eps * math.log(2), abs=1e-7)
    # delta_k = delta_1 collapses to the exit time itself
    assert last_entry_time(decay, [1.0], 0.5, t_exit) == t_exit
    kinds = [k for k, _ in decay.events]
    assert kinds.count("exit_delta") == 1


def test_exit_time_edge_cases(decay):
    assert exit_time(decay, [0.0], 2.0, 0.0) is None
    with pytest.raises(ValueError):
        exit_time(decay, [5.0], 0.5, 0.0)
    with pytest.raises(FlowError):
        last_entry_time(decay, [5.0], 0.5, 1.0)


def test_exit_time_grid_independent(dwell):
    x1 = [-1 / math.sqrt(3)]
    a = integrate_eps_flow(dwell, 1e-2)
    b = integrate_eps_flow(dwell, 1e-2, max_step=5e-3)
    tau = a.times[np.flatnonzero(np.abs(a.states[:, 0] - x1[0]) < 0.1)[0]]
    ta = exit_time(a, x1, 0.1, tau)
    tb = exit_time(b, x1, 0.1, tau)
    assert abs(ta - tb) <= 1e-7


@pytest.fixture(scope="module")
def dwell_rungs(dwell):
    return {eps: integrate_eps_flow(dwell, eps) for eps in (1e-2, 1e-3, 1e-4)}


def test_exit_time_approaches_fold(dwell_rungs):
    x1 = [-1 / math.sqrt(3)]
    gaps = []
    for eps, tr in dwell_rungs.items():
        tau = tr.times[np.flatnonzero(np.linalg.norm(tr.states - x1, axis=1) < 0.1)[0]]
        gaps.append(exit_time(tr, x1, 0.1, tau) - T1)
    assert all(g > 0 for g in gaps)
    assert gaps[1] <= 0.02
    assert all(b <= 0.5 * a for a, b in zip(gaps, gaps[1:]))


def test_last_entry_on_inner_sphere(dwell_rungs):
    x1 = np.array([-1 / math.sqrt(3)])
    tr = dwell_rungs[1e-3]
    tau = tr.times[np.flatnonzero(np.linalg.norm(tr.states - x1, axis=1) < 0.1)[0]]
    te = exit_time(tr, x1, 0.1, tau)
    tl = last_entry_time(tr, x1, 0.05, te)
    assert tl < te
    assert np.linalg.norm(tr.at(tl) - x1) == pytest.approx(0.05, abs=1e-10)


def test_dissipation_residual_shrinks_with_tolerance(quadratic):
    res = []
    for tol in (1e-8, 1e-9):
        tr = integrate_eps_flow(quadratic, 0.1, x_init=[1.0], tol=DEFAULT.replace(ode_tol=tol))
        res.append(abs(dissipation_identity_residual(quadratic, tr).residual))
    assert res[1] < 0.5 * res[0] and res[0] <= 1e-6


def test_dwell_ends_near_right_branch(dwell_rungs):
    tr = dwell_rungs[1e-3]
    assert abs(tr.states[-1, 0] - right_root(0.6)) <= 1e-2


def test_stationary_dissipation(quadratic):
    tr = integrate_eps_flow(quadratic, 0.1, x_init=[0.0])
    chk = dissipation_identity_residual(quadratic, tr)
    assert chk.lhs == 0.0 and chk.rhs == 0.0


def test_dissipation_vanishes_over_ladder(dwell, dwell_rungs):
    d = [dissipation_identity_residual(dwell, tr).lhs for tr in dwell_rungs.values()]
    assert max(d) <= 2 * min(d)
    eps = list(dwell_rungs)
    assert all(e * x < 1e-2 for e, x in zip(eps, d))


def test_no_exit_after_transient(decay):
    assert exit_time(decay, [0.0], 0.5, 0.5) is None
