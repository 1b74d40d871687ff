import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglab.errors import NotTangent, OutsideTube, PerturbationTooLarge
from mfglab.geometry import (Domain, grad_b, hess_b, perturbation_bounds, perturbed_projected_path, project,
                             signed_distance, tangential_line_path)
from mfglab.trajectory import Trajectory


# -- signed distance -----------------------------------------------------------

def test_signed_distance_disk(disk):
    assert signed_distance(disk, [2.0, 0.0]) == pytest.approx(1.0)
    assert signed_distance(disk, [0.0, 0.0]) == pytest.approx(-1.0)


def test_signed_distance_interval(interval):
    assert signed_distance(interval, 0.25) == pytest.approx(-0.75)
    assert signed_distance(interval, 1.0) == 0.0
    assert signed_distance(interval, -1.5) == pytest.approx(0.5)


def test_ellipse_distance_on_axes(ellipse):
    # nearest boundary points on the axes are the vertices when the point lies beyond them
    assert signed_distance(ellipse, [3.0, 0.0]) == pytest.approx(1.0, abs=1e-12)
    assert signed_distance(ellipse, [0.0, 1.5]) == pytest.approx(0.5, abs=1e-12)
    assert signed_distance(ellipse, [0.0, 0.0]) == pytest.approx(-1.0, abs=1e-12)


def test_ellipse_foot_is_on_boundary(ellipse, rng):
    pts = rng.uniform(-2.5, 2.5, size=(200, 2))
    foot = ellipse.boundary_point(pts)
    lhs = (foot[:, 0] / 2.0) ** 2 + foot[:, 1] ** 2
    assert np.max(np.abs(lhs - 1.0)) < 1e-10


def test_ellipse_distance_matches_dense_boundary_scan(ellipse, rng):
    th = np.linspace(0, 2 * np.pi, 200_001)
    curve = np.column_stack([2.0 * np.cos(th), np.sin(th)])
    for x in rng.uniform(-2.5, 2.5, size=(20, 2)):
        brute = np.min(np.linalg.norm(curve - x, axis=1))
        assert abs(abs(signed_distance(ellipse, x)) - brute) < 1e-6


# -- derivatives ---------------------------------------------------------------

def test_grad_hess_disk_examples(disk):
    np.testing.assert_allclose(grad_b(disk, [2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(hess_b(disk, [2.0, 0.0]), np.diag([0.0, 0.5]), atol=1e-15)
    np.testing.assert_allclose(grad_b(disk, [0.0, 0.5]), [0.0, 1.0])
    np.testing.assert_allclose(hess_b(disk, [0.0, 0.5]), np.diag([2.0, 0.0]), atol=1e-15)


def test_grad_hess_interval(interval):
    np.testing.assert_allclose(grad_b(interval, 0.9), [1.0])
    np.testing.assert_allclose(hess_b(interval, 0.9), [[0.0]])


def test_grad_outside_tube_raises(disk):
    with pytest.raises(OutsideTube):
        grad_b(disk, [0.0, 0.0])


def test_rho0_per_kind(interval, disk, ellipse):
    assert interval.rho0 <= 1.0
    assert disk.rho0 <= 1.0
    assert ellipse.rho0 <= 0.5


def test_invalid_domains():
    with pytest.raises(ValueError):
        Domain.interval(1.0, -1.0)
    with pytest.raises(ValueError):
        Domain.disk((0, 0), 0.0)
    with pytest.raises(ValueError):
        Domain.ellipse((0, 0), (1.0, -1.0))


def _tube_points(dom, rng, n):
    """Random points with |b| < rho0, sampled radially around boundary feet."""
    if dom.dim == 1:
        a, b = dom.params
        side = rng.choice([a, b], size=n)
        depth = rng.uniform(-0.99, 0.99, size=n) * dom.rho0
        return (side + np.sign(side) * depth)[:, None]
    th = rng.uniform(0, 2 * np.pi, n)
    far = np.column_stack([np.cos(th), np.sin(th)]) * 10.0
    foot = dom.boundary_point(far)
    nu = dom.normal(foot)
    depth = rng.uniform(-0.99, 0.99, size=n) * dom.rho0
    return foot + depth[:, None] * nu


@pytest.mark.parametrize("kind", ["interval", "disk", "ellipse"])
def test_eikonal_and_hessian_identity(kind, request, rng):
    dom = request.getfixturevalue(kind)
    X = _tube_points(dom, rng, 1000)
    G = dom.normal(X)
    Hs = dom.hess_b(X)
    assert np.max(np.abs(np.linalg.norm(G, axis=1) - 1.0)) <= 1e-10
    quad = np.einsum("mi,mij,mj->m", G, Hs, G)
    assert np.max(np.abs(quad)) <= 1e-8


@pytest.mark.parametrize("kind", ["disk", "ellipse"])
def test_gradient_matches_finite_differences(kind, request, rng):
    dom = request.getfixturevalue(kind)
    X = _tube_points(dom, rng, 30)
    eps = 1e-6
    for x in X:
        fd = np.array([(dom.b(x + eps * e)[0] - dom.b(x - eps * e)[0]) / (2 * eps) for e in np.eye(2)])
        np.testing.assert_allclose(dom.normal(x)[0], fd, atol=1e-6)
        hfd = np.array([(dom.normal(x + eps * e)[0] - dom.normal(x - eps * e)[0]) / (2 * eps) for e in np.eye(2)])
        np.testing.assert_allclose(dom.hess_b(x)[0], hfd.T, atol=1e-5)


# -- projection ----------------------------------------------------------------

def test_project_examples(disk, interval):
    np.testing.assert_allclose(project(disk, [2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(project(disk, [0.3, 0.3]), [0.3, 0.3])
    np.testing.assert_allclose(project(interval, 1.5), [1.0])


def test_project_far_outside_raises(disk):
    with pytest.raises(OutsideTube):
        project(disk, [5.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.8, 1.8), min_size=4, max_size=4))
def test_projection_idempotent_and_lipschitz(coords):
    for dom in (Domain.disk((0, 0), 1.0), Domain.ellipse((0, 0), (1.5, 1.0))):
        x, y = np.array(coords[:2]), np.array(coords[2:])
        px, py = project(dom, x), project(dom, y)
        np.testing.assert_allclose(project(dom, px), px, atol=1e-12)
        assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-8
        assert dom.b(px)[0] <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_signed_distance_is_1_lipschitz(a, b):
    dom = Domain.ellipse((0.2, -0.1), (2.0, 1.0))
    x, y = np.array([a, b]), np.array([b, a])
    assert abs(dom.b(x)[0] - dom.b(y)[0]) <= np.linalg.norm(x - y) + 1e-9


# -- perturbed paths -------------------------------------------------------------

def _line(t0, T, start, vel, n=100):
    s = np.linspace(0, T - t0, n + 1)[:, None]
    return Trajectory(t0, T, np.asarray(start, float)[None, :] + s * np.asarray(vel, float)[None, :])


def test_perturbation_zero_is_identity(disk):
    traj = _line(0.0, 1.0, [0.0, 0.0], [0.3, 0.1])
    out = perturbed_projected_path(disk, traj, [0.0, 0.0], 0.2)
    np.testing.assert_array_equal(out.nodes, traj.nodes)


def test_perturbation_interior_is_exact_shift(disk):
    traj = _line(0.0, 1.0, [-0.2, 0.0], [0.2, 0.1])
    h = np.array([0.01, -0.02])
    r = 0.25
    out = perturbed_projected_path(disk, traj, h, r)
    w = np.clip(1.0 - traj.times / r, 0.0, None)
    np.testing.assert_allclose(out.nodes, traj.nodes + w[:, None] * h, atol=1e-15)
    np.testing.assert_array_equal(out.nodes[traj.times >= r], traj.nodes[traj.times >= r])


def test_perturbation_hugging_boundary(disk):
    th = np.linspace(0, 1.0, 101)
    traj = Trajectory(0.0, 1.0, np.column_stack([np.cos(th), np.sin(th)]))
    h = 0.05 * np.array([1.0, 0.0])
    out = perturbed_projected_path(disk, traj, h, 0.3)
    assert np.all(disk.b(out.nodes) <= 1e-12)
    assert traj.sup_distance(out) <= 2 * np.linalg.norm(h)


def test_perturbation_too_large(disk):
    traj = _line(0.0, 1.0, [0.0, 0.0], [0.0, 0.0])
    with pytest.raises(PerturbationTooLarge):
        perturbed_projected_path(disk, traj, [0.5, 0.0], 0.1)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 2 * np.pi), st.floats(1e-3, 0.1), st.floats(0.05, 0.5))
def test_perturbation_sup_bound(angle, size, r):
    dom = Domain.disk((0, 0), 1.0)
    th = np.linspace(0.0, 0.8, 81)
    traj = Trajectory(0.0, 0.8, np.column_stack([np.cos(th), np.sin(th)]) * 0.99)
    h = size * np.array([np.cos(angle), np.sin(angle)])
    out = perturbed_projected_path(dom, traj, h, max(r, size))
    assert traj.sup_distance(out) <= 2 * size + 1e-12
    assert np.all(dom.b(out.nodes) <= 1e-12)


def test_perturbation_energy_bound_fitted_constant(disk):
    # the squared velocity deviation over the monomial sum, fitted at the largest |h|, bounds the finer scales
    th = np.linspace(0.0, 1.0, 401)
    traj = Trajectory(0.0, 1.0, np.column_stack([np.cos(th), np.sin(th)]))
    direction = np.array([1.0, 0.2]) / np.hypot(1.0, 0.2)

    def monomials(h, r):
        return h * h / r + r * h * h + h * h + h * r + h**4 / r + h**3 + h**3 / r

    def ratio(hs, r):
        return perturbation_bounds(disk, traj, hs * direction, r)[1] / monomials(hs, r)

    radii = (0.4, 0.2, 0.1, 0.05)
    C = max(ratio(0.04, r) for r in radii)
    assert C == pytest.approx(0.0312, abs=5e-4)  # frozen from this run
    for hs in (0.02, 0.01, 0.005, 0.0025):
        for r in radii:
            assert ratio(hs, r) <= 1.2 * C


# -- tangential line paths ---------------------------------------------------------

def test_tangential_line_first_order(disk):
    x = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    path = tangential_line_path(disk, 0.0, x, v, 0.3, n_steps=3000)
    assert np.all(disk.b(path.nodes) <= 1e-12)
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        q = (path.at(h) - x) / h
        errs.append(np.linalg.norm(q - v))
    assert errs[0] < 1e-2
    assert errs[2] < errs[1] < errs[0]


def test_tangential_line_zero_velocity(disk, interval):
    path = tangential_line_path(disk, 0.1, [0.0, 1.0], [0.0, 0.0], 0.2)
    np.testing.assert_allclose(path.nodes, np.tile([0.0, 1.0], (path.n_steps + 1, 1)))
    path = tangential_line_path(interval, 0.0, [1.0], [0.0], 0.2)
    np.testing.assert_allclose(path.nodes, 1.0)


def test_tangential_line_rejects_normal_velocity(disk):
    with pytest.raises(NotTangent):
        tangential_line_path(disk, 0.0, [1.0, 0.0], [1.0, 0.0], 0.1)
    with pytest.raises(NotTangent):
        tangential_line_path(disk, 0.0, [0.5, 0.0], [0.0, 1.0], 0.1)


def test_domain_config_round_trip(ellipse):
    assert Domain.from_config(ellipse.to_config()) == ellipse
    assert Domain.from_config({"kind": "interval", "bounds": [-1, 2]}).params == (-1.0, 2.0)
