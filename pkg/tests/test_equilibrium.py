import numpy as np
import pytest

from conftest import DECOUPLED, ZERO_COST, make_problem
from mfglab.equilibrium import (EquilibriumSettings, best_response, flow_csv, ingest_m0, mild_solution,
                                result_summary, solve_equilibrium, trace_csv)
from mfglab.errors import NotConverged
from mfglab.measures import MeasureFlow, ParticleMeasure, kantorovich_d1, pushforward
from mfglab.model import Model
from mfglab.trajopt import solve_trajectory

KERNEL = {"lagrangian": {"kind": "quadratic"}, "coupling": {"form": "kernel", "sigma": 0.2, "strength": 1.0},
          "terminal": "zero"}
FAST = dict(n_times=41, sampler_steps=40, grid_points=201, threads=1)


def test_ingest_grid_1d(interval):
    m0 = ingest_m0({"kind": "grid", "n": 4}, interval)
    np.testing.assert_allclose(m0.points[:, 0], [-0.75, -0.25, 0.25, 0.75])
    np.testing.assert_allclose(m0.weights, 0.25)
    sub = ingest_m0({"kind": "grid", "n": 2, "support": [0, 1]}, interval)
    np.testing.assert_allclose(sub.points[:, 0], [0.25, 0.75])


def test_ingest_grid_2d(disk):
    m0 = ingest_m0({"kind": "grid", "n": 25}, disk)
    assert len(m0) == 25
    assert np.all(disk.b(m0.points) < 0)


def test_ingest_sample_seeded(interval):
    spec = {"kind": "sample", "n": 30, "density": "gaussian", "mean": [0.2], "std": 0.3}
    a = ingest_m0(spec, interval, seed=7)
    b = ingest_m0(spec, interval, seed=7)
    np.testing.assert_array_equal(a.points, b.points)
    assert np.all(interval.b(a.points) < 0)
    assert not np.array_equal(a.points, ingest_m0(spec, interval, seed=8).points)


def test_ingest_errors(interval):
    with pytest.raises(ValueError):
        ingest_m0({"kind": "particles", "points": [0.0, 1.5]}, interval)
    with pytest.raises(ValueError):
        ingest_m0({"kind": "sample", "n": 3, "density": "cauchy"}, interval)
    with pytest.raises(ValueError):
        ingest_m0({"kind": "lattice"}, interval)


def test_best_response_decoupled_matches_solver(interval):
    prob = make_problem(interval, DECOUPLED, n_steps=40)
    m0 = ParticleMeasure([-0.6, 0.1, 0.5])
    br, costs = best_response(prob, m0, threads=1)
    for j, x in enumerate(m0.points):
        traj, _, val = solve_trajectory(prob, 0.0, x)
        np.testing.assert_allclose(br.paths[j], traj.nodes, atol=1e-12)
        assert costs[j] == pytest.approx(val, abs=1e-12)
    np.testing.assert_allclose(br.weights, m0.weights)


def test_best_response_zero_cost_constant(interval):
    prob = make_problem(interval, ZERO_COST, n_steps=20)
    br, _ = best_response(prob, ParticleMeasure([0.4]), threads=1)
    np.testing.assert_allclose(br.paths[0, :, 0], 0.4, atol=1e-14)


def test_best_response_mirror_symmetric(interval):
    m0 = ParticleMeasure([-0.5, 0.5])
    times = np.linspace(0, 1, 41)
    flow = MeasureFlow(times, np.column_stack([-0.5 + 0.2 * times, 0.5 - 0.2 * times]))
    prob = make_problem(interval, KERNEL, n_steps=40, flow=flow)
    br, costs = best_response(prob, m0, threads=1)
    np.testing.assert_allclose(br.paths[0], -br.paths[1], atol=1e-6)
    assert costs[0] == pytest.approx(costs[1], abs=1e-8)
    assert np.max(np.abs(br.paths[0] - br.paths[0, 0])) > 1e-3


def test_decoupled_converges_in_one_update(interval):
    model = Model.from_config(DECOUPLED, 1)
    m0 = ParticleMeasure([-0.5, 0.0, 0.5])
    res = solve_equilibrium(interval, model, m0, EquilibriumSettings(**FAST))
    assert res.converged
    assert res.iterations == 1
    assert res.trace[1] <= 1e-9
    u, m = mild_solution(res)
    dec = make_problem(interval, DECOUPLED, n_steps=40)
    _, _, val = solve_trajectory(dec, 0.2, [0.3])
    assert u.value(0.2, [0.3]) == pytest.approx(val, abs=1e-9)
    assert u.value(1.0, [0.3]) == pytest.approx(0.3)
    assert m is res.flow


def test_kernel_equilibrium_properties(interval):
    model = Model.from_config(KERNEL, 1)
    m0 = ingest_m0({"kind": "grid", "n": 8, "support": [-0.6, 0.6]}, interval)
    res = solve_equilibrium(interval, model, m0, EquilibriumSettings(tol=2e-2, max_iter=40, **FAST))
    assert res.converged and res.residual <= 2e-2
    assert len(res.trace) == res.iterations + 1
    # transport along the paths bounds d1 between consecutive marginals
    assert res.flow.lipschitz_estimate() <= res.flow.max_speed() + 1e-12
    assert np.max(res.support_gaps()) <= res.settings.tol_opt
    assert kantorovich_d1(pushforward(res.eta, 0.0), m0) <= 1e-9
    # repulsive kernel spreads the ensemble
    assert np.ptp(res.flow.points[-1]) > np.ptp(m0.points)
    summary = result_summary(res)
    assert summary["converged"] and summary["iterations"] == res.iterations
    assert summary["coupling_gap"] <= 2e-2 + 1e-12


def test_not_converged_strict(interval):
    model = Model.from_config(KERNEL, 1)
    m0 = ingest_m0({"kind": "grid", "n": 6, "support": [-0.3, 0.3]}, interval)
    with pytest.raises(NotConverged) as info:
        solve_equilibrium(interval, model, m0, EquilibriumSettings(tol=1e-12, max_iter=1, **FAST), strict=True)
    res = info.value.result
    assert not res.converged and len(res.trace) == 2


def test_exports_deterministic(interval):
    model = Model.from_config(DECOUPLED, 1)
    m0 = ParticleMeasure([-0.5, 0.5])
    res = solve_equilibrium(interval, model, m0, EquilibriumSettings(**FAST))
    text = flow_csv(res.flow)
    assert text.splitlines()[0] == "time,particle,x0,weight"
    assert len(text.splitlines()) == 1 + 41 * 2
    again = solve_equilibrium(interval, model, m0, EquilibriumSettings(**FAST))
    assert flow_csv(again.flow) == text
    assert trace_csv(res.trace).splitlines()[0] == "k,eps"
