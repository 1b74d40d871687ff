import numpy as np
import pytest

from conftest import DECOUPLED, TRAPPED, ZERO_COST, make_problem
from mfglab.errors import DimensionUnsupported, Infeasible
from mfglab.trajopt import (dp_oracle_value, lstar_bound, necessary_condition_residuals, solve_trajectory,
                            trajectory_cost, trajectory_csv)

CURVED = {"lagrangian": {"kind": "quadratic", "potential": "quadratic:c=2"}, "coupling": {"form": "zero"},
          "terminal": "linear:a=[1]"}
DRIFT_TRAPPED = {"lagrangian": {"kind": "drift-quadratic", "drift": "const:b=[1]", "potential": "linear:a=[-2]"},
                 "coupling": {"form": "zero"}, "terminal": "zero"}


def test_decoupled_closed_form(decoupled):
    traj, dual, val = solve_trajectory(decoupled, 0.0, [0.0])
    np.testing.assert_allclose(traj.nodes[:, 0], -traj.times, atol=1e-8)
    assert val == pytest.approx(-0.5, abs=1e-10)
    np.testing.assert_allclose(dual.p[:, 0], 1.0, atol=1e-8)
    assert dual.terminal_nu == 0.0


def test_zero_cost_is_constant(interval):
    prob = make_problem(interval, ZERO_COST, n_steps=50)
    traj, dual, val = solve_trajectory(prob, 0.0, [0.3])
    np.testing.assert_allclose(traj.nodes, 0.3, atol=1e-14)
    assert val == pytest.approx(0.7, abs=1e-14)
    np.testing.assert_allclose(dual.p, 0.0, atol=1e-12)
    res = necessary_condition_residuals(prob, traj, dual)
    for key in ("adjoint", "feedback", "terminal", "max_speed"):
        assert res[key] <= 1e-12


def test_disk_closed_form(disk):
    spec = dict(DECOUPLED, terminal="linear:a=[1,0]")
    prob = make_problem(disk, spec, n_steps=50)
    traj, _, val = solve_trajectory(prob, 0.0, [0.0, 0.0])
    np.testing.assert_allclose(traj.nodes[:, 0], -traj.times, atol=1e-7)
    np.testing.assert_allclose(traj.nodes[:, 1], 0.0, atol=1e-7)
    assert val == pytest.approx(-0.5, abs=1e-8)


def test_residuals_fine_grid(interval):
    prob = make_problem(interval, DECOUPLED, n_steps=1000)
    traj, dual, _ = solve_trajectory(prob, 0.0, [0.0])
    res = necessary_condition_residuals(prob, traj, dual)
    assert res["adjoint"] <= 1e-6 and res["feedback"] <= 1e-6 and res["terminal"] <= 1e-6
    assert res["velocity_margin"] > 0


def test_terminal_boundary_multiplier(interval):
    # with g = 3x the unconstrained optimum leaves the domain, so the path ends on the wall
    prob = make_problem(interval, dict(DECOUPLED, terminal="linear:a=[3]"), n_steps=200)
    traj, dual, val = solve_trajectory(prob, 0.0, [0.5])
    assert traj.nodes[-1, 0] == pytest.approx(-1.0, abs=1e-9)
    # constant velocity -1.5 to the wall; p(T) = Dg + nu * Db with nu = 1.5
    assert val == pytest.approx(0.5 * 1.5**2 - 3.0, abs=1e-8)
    res = necessary_condition_residuals(prob, traj, dual)
    assert res["terminal_nu"] == pytest.approx(1.5, abs=1e-6)
    assert res["terminal"] <= 1e-6


def test_boundary_active_drift_multipliers(interval):
    prob = make_problem(interval, DRIFT_TRAPPED, n_steps=400)
    traj, dual, _ = solve_trajectory(prob, 0.0, [0.9])
    res = necessary_condition_residuals(prob, traj, dual)
    active = np.abs(interval.b(traj.nodes)) <= 1e-9
    assert active.sum() > 100
    interior_active = active.copy()
    interior_active[[0, -1]] = False
    assert np.all(dual.beta[interior_active] > 0)
    assert np.all(dual.beta[~active] == 0)
    assert res["adjoint"] <= 1e-4
    assert res["min_multiplier"] >= -1e-10
    assert res["complementarity"] <= 1e-8
    # resting on the wall, the multiplier density balances the potential slope -D_xl = 2
    # (the arrival node carries only part of an interval)
    np.testing.assert_allclose(dual.multiplier_density[interior_active][1:], 2.0, atol=1e-6)


def test_dynamic_programming_principle(interval):
    prob = make_problem(interval, CURVED, n_steps=80)
    traj, _, val = solve_trajectory(prob, 0.0, [0.4])
    k = 20
    _, _, tail = solve_trajectory(prob, traj.times[k], traj.nodes[k], n_steps=80 - k)
    head = trajectory_cost(prob, traj) - trajectory_cost(
        prob, type(traj)(traj.times[k], traj.T, traj.nodes[k:]))
    assert val == pytest.approx(head + tail, abs=1e-8)


def _curved_exact_value(x0, T=1.0):
    # x'' = 2x, x(0) = x0, x'(T) = -1
    r = np.sqrt(2.0)
    B = (-1.0 - x0 * r * np.sinh(r * T)) / (r * np.cosh(r * T))
    s = np.linspace(0, T, 200001)
    x = x0 * np.cosh(r * s) + B * np.sinh(r * s)
    v = x0 * r * np.sinh(r * s) + B * r * np.cosh(r * s)
    f = 0.5 * v**2 + x**2
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)) + x[-1])


def test_feedback_exact_and_value_converges(interval):
    exact = _curved_exact_value(0.4)
    errs = []
    for n in (25, 50, 100):
        prob = make_problem(interval, CURVED, n_steps=n)
        traj, dual, val = solve_trajectory(prob, 0.0, [0.4])
        res = necessary_condition_residuals(prob, traj, dual)
        # the dual arc is read off the feedback law, so that residual vanishes identically
        assert res["feedback"] <= 1e-12
        assert res["adjoint"] <= 1e-9
        errs.append(abs(val - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9)


def test_lstar(interval):
    prob = make_problem(interval, DECOUPLED)
    bound = lstar_bound(prob)
    assert bound >= 1
    for x0 in (-0.8, 0.0, 0.7):
        traj, _, _ = solve_trajectory(prob, 0.0, [x0])
        assert np.abs(traj.velocities).max() <= bound
    scaled = make_problem(interval, dict(DECOUPLED, terminal="linear:a=[10]"))
    assert lstar_bound(scaled) > bound
    flat = make_problem(interval, ZERO_COST)
    traj, _, _ = solve_trajectory(flat, 0.0, [0.2])
    assert np.abs(traj.velocities).max() <= 1e-6


def test_dp_oracle(interval, decoupled):
    assert dp_oracle_value(decoupled, 0.0, [0.0]) == pytest.approx(-0.5, abs=2e-2)
    flat = make_problem(interval, ZERO_COST)
    assert dp_oracle_value(flat, 0.0, [0.3]) == pytest.approx(0.7, abs=1e-14)
    trapped = make_problem(interval, TRAPPED)
    d = 0.09
    exact = 4 / 3 * d**1.5 - 2.0
    # optimal speeds stay below 2(T - t), far under the crude L* bound
    errs = [abs(dp_oracle_value(trapped, 0.0, [1 - d], dx=h, vmax=4.0) - exact) for h in (2e-2, 1e-2, 5e-3)]
    assert errs[0] > errs[1] > errs[2]


def test_dp_oracle_matches_trapped_closed_form(interval):
    prob = make_problem(interval, TRAPPED, n_steps=200)
    d = 0.09
    exact = 4 / 3 * d**1.5 - 2.0
    _, _, val = solve_trajectory(prob, 0.0, [1 - d])
    assert val == pytest.approx(exact, abs=1e-3)
    assert dp_oracle_value(prob, 0.0, [1 - d], dx=5e-3, vmax=4.0) == pytest.approx(exact, abs=2e-2)


def test_dp_oracle_1d_only(disk):
    prob = make_problem(disk, dict(DECOUPLED, terminal="linear:a=[1,0]"))
    with pytest.raises(DimensionUnsupported):
        dp_oracle_value(prob, 0.0, [0.0, 0.0])


def test_infeasible_start(decoupled):
    with pytest.raises(Infeasible):
        solve_trajectory(decoupled, 0.0, [1.5])


def test_trajectory_csv(decoupled):
    traj, dual, _ = solve_trajectory(decoupled, 0.0, [0.0])
    text = trajectory_csv(decoupled, traj, dual)
    lines = text.strip().split("\n")
    assert lines[0] == "time,x0,speed,b,multiplier"
    assert len(lines) == decoupled.n_steps + 2
    assert text == trajectory_csv(decoupled, traj, dual)
