import numpy as np
import pytest

from conftest import DECOUPLED, TRAPPED, ZERO_COST, make_problem
from mfglab.errors import NotInCone, OutOfWindow
from mfglab.model import lambda_plus
from mfglab.valuefn import (ValueSampler, directional_derivative, dyadic_scales, fit_power_law, min_over_slopes,
                            semiconcavity_probe, sensitivity_probe, subdifferential, superdifferential,
                            supporting_constant, sweep_csv)

CURVED = {"lagrangian": {"kind": "quadratic", "potential": "quadratic:c=2"}, "coupling": {"form": "zero"},
          "terminal": "linear:a=[1]"}


@pytest.fixture
def dec_sampler(decoupled):
    return ValueSampler(decoupled)


@pytest.fixture
def trapped_sampler(interval):
    return ValueSampler(make_problem(interval, TRAPPED, n_steps=200))


@pytest.fixture
def kink(interval):
    return ValueSampler.synthetic(lambda t, x: -abs(x[0]), interval)


def test_terminal_value_is_g(dec_sampler):
    assert dec_sampler.value(1.0, [0.37]) == 0.37


def test_decoupled_value(dec_sampler):
    assert dec_sampler.value(0.0, [0.0]) == pytest.approx(-0.5, abs=1e-10)
    # u(t, x) = x - (T - t)/2 while the optimal path stays inside
    assert dec_sampler.value(0.4, [0.2]) == pytest.approx(0.2 - 0.3, abs=1e-10)


def test_zero_cost_value(interval):
    s = ValueSampler(make_problem(interval, ZERO_COST))
    for t, x in [(0.0, -0.9), (0.5, 0.0), (0.8, 1.0)]:
        assert s.value(t, [x]) == pytest.approx(0.7, abs=1e-14)


def test_cache_reproducible(decoupled):
    a = ValueSampler(decoupled)
    b = ValueSampler(decoupled)
    pts = [(0.1, np.array([0.2])), (0.3, np.array([-0.7])), (0.0, np.array([0.95]))]
    np.testing.assert_allclose(a.values(pts), b.values(pts), atol=1e-9)
    n = len(a)
    a.values(pts)
    assert len(a) == n


def test_trapped_closed_form(trapped_sampler):
    # every probe satisfies d <= (T - t)^2, so the optimal path reaches the wall
    for t, d in [(0.0, 0.09), (0.25, 0.2), (0.5, 0.0)]:
        exact = 4 / 3 * d**1.5 - 2 * (1 - t)
        assert trapped_sampler.value(t, [1 - d]) == pytest.approx(exact, abs=1e-3)


def test_lipschitz_estimate_bounded(dec_sampler, rng):
    pairs = [((rng.uniform(0, 0.8), rng.uniform(-1, 1, 1)), (rng.uniform(0, 0.8), rng.uniform(-1, 1, 1)))
             for _ in range(10)]
    assert dec_sampler.lipschitz_estimate(pairs) <= 1.5


def test_interior_superdifferential_singleton(dec_sampler):
    est = superdifferential(dec_sampler, 0.2, [0.3], extrapolate=True)
    assert est.is_singleton(1e-4)
    np.testing.assert_allclose(est.center(), [0.5, 1.0], atol=1e-4)
    assert not est.boundary


def test_superdifferential_matches_central_differences(interval):
    s = ValueSampler(make_problem(interval, CURVED, n_steps=200))
    t, x, h = 0.3, 0.1, 1e-3
    ux = (s.value(t, [x + h]) - s.value(t, [x - h])) / (2 * h)
    ut = (s.value(t + h, [x]) - s.value(t - h, [x])) / (2 * h)
    est = superdifferential(s, t, [x], extrapolate=True)
    np.testing.assert_allclose(est.center(), [ut, ux], atol=1e-3)


def test_slopes_stable_under_base_shift(dec_sampler):
    a = superdifferential(dec_sampler, 0.2, [0.3], extrapolate=True)
    b = superdifferential(dec_sampler, 0.2, [0.301], extrapolate=True)
    np.testing.assert_allclose(a.center(), b.center(), atol=1e-4)


def test_subdifferential_agrees_at_smooth_point(dec_sampler):
    sup = superdifferential(dec_sampler, 0.2, [0.3], extrapolate=True)
    sub = subdifferential(dec_sampler, 0.2, [0.3])
    np.testing.assert_allclose(sub.center(), sup.center(), atol=1e-3)


def test_kink_slope_interval(kink):
    est = superdifferential(kink, 0.2, [0.0])
    assert est.lower[1] == pytest.approx(-1.0, abs=1e-3)
    assert est.upper[1] == pytest.approx(1.0, abs=1e-3)
    assert est.time_slope == pytest.approx(0.0, abs=1e-3)


def test_kink_directional_derivatives(kink):
    est = superdifferential(kink, 0.2, [0.0])
    for theta in (1.0, -1.0, 0.5):
        dd = directional_derivative(kink, 0.2, [0.0], [theta])
        assert dd == pytest.approx(-abs(theta), abs=1e-12)
        assert min_over_slopes(est, [theta]) == pytest.approx(dd, abs=1e-3)


def test_boundary_ray(trapped_sampler, interval):
    est = superdifferential(trapped_sampler, 0.25, [1.0], extrapolate=True)
    assert est.boundary and est.is_ray(1e-3)
    # u(t, 1 - d) = 4/3 d^{3/2} - 2 (T - t) has zero normal slope, so lambda_max = 0
    assert est.lambda_max == pytest.approx(0.0, abs=1e-3)
    assert est.time_slope == pytest.approx(2.0, abs=1e-3)


def test_normal_derivative_is_minus_lambda_plus(trapped_sampler, interval):
    prob = trapped_sampler.prob
    lam = lambda_plus(prob.ham, interval, [1.0], [0.0])
    dd = directional_derivative(trapped_sampler, 0.25, [1.0], [-1.0])
    assert dd == pytest.approx(-lam, abs=1e-3)


def test_not_in_cone(trapped_sampler):
    with pytest.raises(NotInCone):
        directional_derivative(trapped_sampler, 0.25, [1.0], [1.0])


def test_smooth_directional_derivative(dec_sampler):
    assert directional_derivative(dec_sampler, 0.2, [0.3], [-2.0]) == pytest.approx(-2.0, abs=1e-6)


def test_probes_vanish_at_zero(dec_sampler):
    assert sensitivity_probe(dec_sampler, 0.2, [0.3], [1.0], [0.0], 0.0) == 0.0
    assert semiconcavity_probe(dec_sampler, 0.2, [0.3], [0.0], 0.0) == 0.0


def test_sensitivity_linear_region(dec_sampler):
    p = dec_sampler.gradient(0.2, [0.3])
    np.testing.assert_allclose(p, [1.0], atol=1e-8)
    for h in dyadic_scales(3, 6):
        assert abs(sensitivity_probe(dec_sampler, 0.2, [0.3], p, [h], h)) <= 1e-8


def test_window_errors(dec_sampler):
    with pytest.raises(OutOfWindow):
        sensitivity_probe(dec_sampler, 0.85, [0.0], [1.0], [0.0], 0.1)
    with pytest.raises(OutOfWindow):
        semiconcavity_probe(dec_sampler, 0.2, [0.95], [0.1], 0.0)
    with pytest.raises(OutOfWindow):
        superdifferential(dec_sampler, 1.0, [0.0])


def test_interior_semiconcavity_exponent(interval):
    s = ValueSampler(make_problem(interval, CURVED, n_steps=200))
    scales = dyadic_scales(3, 7)
    d = [semiconcavity_probe(s, 0.3, [0.1], [h], h) for h in scales]
    alpha, c = fit_power_law(scales, d)
    assert alpha == pytest.approx(2.0, abs=0.05)


def test_dual_arc_membership(interval):
    s = ValueSampler(make_problem(interval, CURVED, n_steps=200))
    traj, dual, _ = s.solve(0.0, [0.4])
    for k in (0, 40, 80, 120):
        t, y, p = traj.times[k], traj.nodes[k], dual.p[k]
        q = np.concatenate([[s.hamiltonian_f(t, y, p)], p])
        assert supporting_constant(s, t, y, q) <= 0.5


def test_fit_power_law_exact():
    sc = np.array([0.1, 0.05, 0.025])
    alpha, c = fit_power_law(sc, 3.0 * sc**1.5)
    assert alpha == pytest.approx(1.5)
    assert c == pytest.approx(3.0)
    assert np.isnan(fit_power_law([0.1], [1.0])[0])


def test_sweep_csv():
    text = sweep_csv([{"label": "a", "r": 0.5, "defect": 1e-3, "alpha": 1.5, "c": 2.0}])
    assert text.splitlines()[0] == "label,r,defect,alpha,c"
    assert text.splitlines()[1].startswith("a,5.000000000000e-01,")


def test_boundary_min_over_slopes_uses_ray(trapped_sampler):
    est = superdifferential(trapped_sampler, 0.25, [1.0], extrapolate=True)
    dd = directional_derivative(trapped_sampler, 0.25, [1.0], [-1.0])
    assert min_over_slopes(est, [-1.0]) == pytest.approx(dd, abs=1e-3)
    assert min_over_slopes(est, [1.0]) == -np.inf
