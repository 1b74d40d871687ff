"""PDE-level checks on a computed mild solution (u, m).

On the support of m the value function should satisfy the HJB equation
pointwise: with the full Hamiltonian at interior support points, with the
tangential Hamiltonian (or equivalently H at D^tau u + lambda_+ nu) at
boundary support points.  The flow should solve the continuity equation
weakly with the feedback velocity V = -D_pH(x, Du).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import BadTestFunction, NoInteriorApproach, NotOnSupport
from .measures import MeasureFlow, PathMeasure
from .model import lambda_plus, tangential_hamiltonian
from .valuefn import ValueSampler, subdifferential, superdifferential

INTERIOR, BOUNDARY, OFF = "interior_support", "boundary_support", "off_support"
# points with |b| below this count as boundary points
BOUNDARY_TOL = 1e-6
FD_STEP = 1e-3
FD_FLOOR_FRAC = 1e-4


# -- support classification -------------------------------------------------------

@dataclass
class SupportClassifier:
    """Approximates supp m(t) from a particle flow.

    ``delta_b`` defaults to twice the median nearest-neighbour spacing of
    the initial particles and ``delta_m`` to half the smallest weight.
    """

    flow: MeasureFlow
    dom: object
    delta_b: float | None = None
    delta_m: float | None = None

    def __post_init__(self):
        if self.delta_b is None:
            pts = self.flow.points[0]
            if pts.shape[0] > 1:
                d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
                np.fill_diagonal(d, np.inf)
                spacing = float(np.median(d.min(axis=1)))
            else:
                spacing = 1e-3 * self.dom.diameter
            self.delta_b = 2.0 * max(spacing, 1e-12)
        if self.delta_m is None:
            self.delta_m = 0.5 * float(self.flow.weights.min())

    def classify(self, t, x) -> str:
        i = self.flow.index(t)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        d = np.linalg.norm(self.flow.points[i] - x, axis=1)
        near = d <= self.delta_b
        if not np.any(near) or self.flow.weights[near].sum() < self.delta_m:
            return OFF
        return BOUNDARY if abs(self.dom.b(x)[0]) <= BOUNDARY_TOL else INTERIOR


def classify_support(flow: MeasureFlow, dom, t, x, delta_b=None, delta_m=None) -> str:
    return SupportClassifier(flow, dom, delta_b, delta_m).classify(t, x)


# -- derivative estimates -----------------------------------------------------------

def _time_derivative(sampler: ValueSampler, t, x, step=FD_STEP):
    lo = t - step >= 0.0
    hi = t + step < sampler.T
    if lo and hi:
        return (sampler.value(t + step, x) - sampler.value(t - step, x)) / (2 * step)
    if hi:
        return (-3 * sampler.value(t, x) + 4 * sampler.value(t + step, x) - sampler.value(t + 2 * step, x)) / (2 * step)
    return (3 * sampler.value(t, x) - 4 * sampler.value(t - step, x) + sampler.value(t - 2 * step, x)) / (2 * step)


def spatial_gradient(sampler: ValueSampler, t, x, step=FD_STEP):
    """Central differences with step min(step, dist/2); the exact discrete gradient very near the boundary."""
    dom = sampler.dom
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dist = -dom.b(x)[0]
    h = min(step, 0.5 * dist)
    if h < FD_FLOOR_FRAC * dom.diameter:
        return sampler.gradient(t, x)
    g = np.zeros(dom.dim)
    for i in range(dom.dim):
        e = np.zeros(dom.dim)
        e[i] = h
        g[i] = (sampler.value(t, x + e) - sampler.value(t, x - e)) / (2 * h)
    return g


def tangential_gradient(sampler: ValueSampler, t, x, step=FD_STEP):
    """D^tau u at a boundary point by central differences along projected tangent moves."""
    dom = sampler.dom
    x = np.atleast_1d(np.asarray(x, dtype=float))
    tb = dom.tangent_basis(x)[0]
    g = np.zeros(dom.dim)
    for j in range(tb.shape[1]):
        yp = dom.nearest(x + step * tb[:, j])[0]
        ym = dom.nearest(x - step * tb[:, j])[0]
        g += (sampler.value(t, yp) - sampler.value(t, ym)) / (2 * step) * tb[:, j]
    return g


def _F(sampler, t, x):
    X = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    return float(sampler.prob.running.value(np.array([float(t)]), X)[0])


def hjb_residual_interior(sampler: ValueSampler, flow: MeasureFlow, t, x, classifier=None) -> float:
    """|-d_t u + H(x, Du) - F(x, m(t))| at an interior support point."""
    cls = classifier or SupportClassifier(flow, sampler.dom)
    if cls.classify(t, x) != INTERIOR:
        raise NotOnSupport(f"({t}, {x}) is not an interior support point")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ut = _time_derivative(sampler, t, x)
    p = spatial_gradient(sampler, t, x)
    H = sampler.prob.ham.H(x[None, :], p[None, :])[0]
    return float(abs(-ut + H - _F(sampler, t, x)))


@dataclass
class BoundaryResidual:
    tangential: float
    full: float
    lambda_plus: float
    tangency: float
    p_tau: np.ndarray


def hjb_residual_boundary(sampler: ValueSampler, flow: MeasureFlow, t, x, classifier=None) -> BoundaryResidual:
    """Tangential-Hamiltonian residual and its lambda_+ form at a boundary support point."""
    cls = classifier or SupportClassifier(flow, sampler.dom)
    if cls.classify(t, x) != BOUNDARY:
        raise NotOnSupport(f"({t}, {x}) is not a boundary support point")
    dom, ham = sampler.dom, sampler.prob.ham
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ut = _time_derivative(sampler, t, x)
    pt = tangential_gradient(sampler, t, x)
    F = _F(sampler, t, x)
    Ht = tangential_hamiltonian(ham, dom, x, pt)
    lam = lambda_plus(ham, dom, x, pt)
    nu = dom.normal(x)[0]
    q = pt + lam * nu
    Hf = ham.H(x[None, :], q[None, :])[0]
    tangency = abs(float(ham.D_p(x[None, :], q[None, :])[0] @ nu))
    return BoundaryResidual(float(abs(-ut + Ht - F)), float(abs(-ut + Hf - F)), float(lam), tangency, pt)


def gradient_limit_check(sampler: ValueSampler, flow: MeasureFlow, t, x, radii=(0.04, 0.02, 0.01)) -> dict:
    """Distances from interior gradients Du(t, x - r nu) to D^tau u + lambda_+ nu for shrinking r."""
    dom, ham = sampler.dom, sampler.prob.ham
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if abs(dom.b(x)[0]) > BOUNDARY_TOL:
        raise NotOnSupport("gradient limits are taken at boundary points")
    nu = dom.normal(x)[0]
    g0 = sampler.gradient(t, x)
    pt = g0 - (g0 @ nu) * nu
    lam = lambda_plus(ham, dom, x, pt)
    target = pt + lam * nu
    dist = []
    for r in radii:
        y = x - r * nu
        if dom.b(y)[0] > -0.5 * r:
            raise NoInteriorApproach(f"no interior point at depth {r} from {x}")
        dist.append(float(np.linalg.norm(sampler.gradient(t, y) - target)))
    along = []
    tb = dom.tangent_basis(x)[0]
    if tb.shape[1]:
        for r in radii:
            y = dom.nearest(x + r * tb[:, 0])[0]
            ny = dom.normal(y)[0]
            gy = sampler.gradient(t, y)
            py = gy - (gy @ ny) * ny
            ly = lambda_plus(ham, dom, y, py)
            along.append(float(np.linalg.norm(py + ly * ny - target)))
    monotone = all(b < a for a, b in zip(dist, dist[1:])) or max(dist) <= 1e-6
    return {"radii": list(radii), "interior": dist, "boundary": along, "target": target,
            "lambda_plus": lam, "monotone": monotone}


# -- velocity field -----------------------------------------------------------------------

@dataclass
class VelocityField:
    """V(t, x) = -D_pH(x, Du) on interior support, -D_pH(x, D^tau u + lambda_+ nu) on boundary support.

    Off the support, V is the inverse-distance weighted average of its values
    at the 8 nearest support particles at the same time, flagged as extended.
    When ``paths`` (the path measure whose marginals are ``flow``) is given,
    value solves at flow atoms are warm-started from the path tails.
    """

    sampler: ValueSampler
    flow: MeasureFlow
    classifier: SupportClassifier
    paths: PathMeasure | None = None
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _hint(self, i, j):
        eta = self.paths
        if eta is None:
            return None
        return eta.times[i:], eta.paths[j, i:]

    def _support_value(self, t, x, hint=None):
        dom, ham = self.sampler.dom, self.sampler.prob.ham
        x = np.atleast_1d(np.asarray(x, dtype=float))
        key = (round(float(t), 12), tuple(np.round(x, 12)))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        p = self.sampler.solve(t, x, hint=hint)[1].value_gradient
        if abs(dom.b(x)[0]) <= BOUNDARY_TOL:
            nu = dom.normal(x)[0]
            pt = p - (p @ nu) * nu
            p = pt + lambda_plus(ham, dom, x, pt) * nu
        v = -ham.D_p(x[None, :], p[None, :])[0]
        with self._lock:
            self._cache[key] = v
        return v

    def evaluate(self, t, x):
        """Return (V, kind, extended)."""
        kind = self.classifier.classify(t, x)
        if kind != OFF:
            return self._support_value(t, x), kind, False
        i = self.flow.index(t)
        pts = self.flow.points[i]
        d = np.linalg.norm(pts - np.atleast_1d(x), axis=1)
        near = np.argsort(d, kind="stable")[:8]
        w = 1.0 / np.maximum(d[near], 1e-12) ** 2
        vals = np.array([self._support_value(t, pts[j], self._hint(i, j)) for j in near])
        return (w @ vals) / w.sum(), OFF, True

    def __call__(self, t, x):
        return self.evaluate(t, x)[0]

    def on_flow(self, times_idx=None):
        """V at every particle of the flow, shape (n_times, n_atoms, dim); the final time is left at 0."""
        fl = self.flow
        idx = range(fl.n_times - 1) if times_idx is None else times_idx
        out = np.zeros_like(fl.points)
        for i in idx:
            for j in range(fl.points.shape[1]):
                out[i, j] = self._support_value(fl.times[i], fl.points[i, j], self._hint(i, j))
        return out


def velocity_field(sampler: ValueSampler, flow: MeasureFlow, classifier=None, paths=None) -> VelocityField:
    if paths is not None and (paths.times.shape != flow.times.shape or not np.allclose(paths.times, flow.times)):
        raise ValueError("paths must share the flow's time grid")
    return VelocityField(sampler, flow, classifier or SupportClassifier(flow, sampler.dom), paths)


def particle_velocity_consistency(eta: PathMeasure, V: VelocityField, times_idx=None) -> float:
    """max |gamma'(t_i) - V(t_i, gamma(t_i))| over paths and grid times before T."""
    worst = 0.0
    idx = range(1, len(eta.times) - 1) if times_idx is None else times_idx
    for j in range(len(eta)):
        vel = eta.trajectory(j).node_velocities()
        for i in idx:
            worst = max(worst, float(np.linalg.norm(vel[i] - V._support_value(eta.times[i], eta.paths[j, i],
                                                                           (eta.times[i:], eta.paths[j, i:])))))
    return worst


# -- continuity equation ----------------------------------------------------------------

def _bspline(z):
    """Cubic B-spline kernel on [-2, 2] and its derivative."""
    a = np.abs(z)
    val = np.where(a < 1, 2 / 3 - a**2 + a**3 / 2, np.where(a < 2, (2 - a) ** 3 / 6, 0.0))
    der = np.where(a < 1, -2 * a + 1.5 * a**2, np.where(a < 2, -0.5 * (2 - a) ** 2, 0.0)) * np.sign(z)
    return val, der


@dataclass(frozen=True)
class BumpTestFunction:
    """phi(t, x) = B((t - ct)/wt) * prod_d B((x_d - cx_d)/wx_d) with the cubic B-spline B."""

    ct: float
    wt: float
    cx: tuple
    wx: tuple

    def check(self, T):
        if self.ct - 2 * self.wt <= 0 or self.ct + 2 * self.wt >= T:
            raise BadTestFunction("time support of the test function touches 0 or T")

    def parts(self, t, X):
        bt, dbt = _bspline((t - self.ct) / self.wt)
        cx, wx = np.asarray(self.cx), np.asarray(self.wx)
        Z = (X - cx) / wx
        bx, dbx = _bspline(Z)
        prod = np.prod(bx, axis=1)
        grad = np.empty_like(X)
        for d in range(X.shape[1]):
            others = np.prod(np.delete(bx, d, axis=1), axis=1) if X.shape[1] > 1 else 1.0
            grad[:, d] = dbx[:, d] / wx[d] * others
        return bt * prod, dbt / self.wt * prod, bt * grad

    def c1_norm(self):
        n = len(self.cx)
        return (2 / 3) ** (n + 1) + (2 / 3) ** n * 0.5 / self.wt + (2 / 3) ** n * 0.5 * sum(1.0 / w for w in self.wx)


def random_bumps(dom, T, n, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = dom.bounding_box()
    out = []
    for _ in range(n):
        wt = rng.uniform(0.05, 0.1) * T
        ct = rng.uniform(2 * wt + 0.02 * T, T - 2 * wt - 0.02 * T)
        cx = tuple(rng.uniform(lo, hi))
        wx = tuple(rng.uniform(0.1, 0.25, size=dom.dim) * dom.diameter)
        out.append(BumpTestFunction(float(ct), float(wt), cx, wx))
    return out


def continuity_residual(flow: MeasureFlow, V, testfn: BumpTestFunction, velocities=None) -> float:
    """|int int (d_t phi + <D phi, V>) dm dt| / ||phi||_C1 with trapezoid weights in time."""
    T = flow.times[-1]
    testfn.check(T)
    vel = velocities if velocities is not None else V.on_flow()
    dt = np.diff(flow.times)
    w = np.zeros(flow.n_times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    total = 0.0
    for i, t in enumerate(flow.times):
        _, phit, gradx = testfn.parts(t, flow.points[i])
        integrand = phit + np.sum(gradx * vel[i], axis=1)
        total += w[i] * (flow.weights @ integrand)
    return float(abs(total) / testfn.c1_norm())


# -- viscosity inequalities --------------------------------------------------------------

def viscosity_checks(sampler: ValueSampler, points, r=0.02, tol=2e-2) -> dict:
    """Sub- and supersolution inequalities over estimated super/subdifferential slopes.

    Superdifferential slopes at interior points must satisfy
    -q_t + H(x, q_x) <= F + tol; subdifferential slopes at any point of the
    closed domain must satisfy >= F - tol.
    """
    ham, dom = sampler.prob.ham, sampler.dom
    sub_worst, super_worst = 0.0, 0.0
    for t, x in points:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        F = _F(sampler, t, x)
        if dom.b(x)[0] < -r:
            # extrapolated bounds: the raw r-stencil box is O(r^{1/2}) wide even where u is smooth
            est = superdifferential(sampler, t, x, r=r, extrapolate=True)
            corners = _box_corners(est.lower, est.upper)
            vals = [-c[0] + ham.H(x[None, :], c[None, 1:])[0] - F for c in corners]
            super_worst = max(super_worst, max(vals))
        est = subdifferential(sampler, t, x, r=r)
        lo, hi = est.lower.copy(), est.upper.copy()
        hi = np.where(np.isfinite(hi), hi, lo + 10.0)
        lo = np.where(np.isfinite(lo), lo, hi - 10.0)
        grid = np.stack(np.meshgrid(*[np.linspace(a, b, 9) for a, b in zip(lo, hi)], indexing="ij"), -1)
        Q = grid.reshape(-1, lo.shape[0])
        Q = Q[[est.contains(q, tol=1e-9) for q in Q]] if Q.shape[0] else Q
        if Q.shape[0]:
            vals = -Q[:, 0] + ham.H(np.repeat(x[None, :], Q.shape[0], 0), Q[:, 1:]) - F
            sub_worst = min(sub_worst, float(vals.min()))
    return {"super_max": float(super_worst), "sub_min": float(sub_worst),
            "super_pass": super_worst <= tol, "sub_pass": sub_worst >= -tol}


def _box_corners(lo, hi):
    grids = np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


# -- panels over a run -----------------------------------------------------------------------

def support_probes(flow: MeasureFlow, dom, classifier: SupportClassifier, n_interior=100, n_boundary=40,
                   t_margin=1, seed=0):
    """Deterministic selection of (t, x, kind) support probes from grid times strictly inside (0, T)."""
    rng = np.random.default_rng(seed)
    interior, boundary = [], []
    for i in range(t_margin, flow.n_times - t_margin):
        t = float(flow.times[i])
        for j in range(flow.points.shape[1]):
            x = flow.points[i, j]
            kind = classifier.classify(t, x)
            if kind == INTERIOR:
                interior.append((t, x))
            elif kind == BOUNDARY:
                boundary.append((t, x))

    def pick(items, n):
        if len(items) <= n:
            return items
        sel = np.sort(rng.choice(len(items), size=n, replace=False))
        return [items[k] for k in sel]

    # boundary points: dedupe identical positions at a time
    seen, uniq = set(), []
    for t, x in boundary:
        key = (t, tuple(np.round(x, 12)))
        if key not in seen:
            seen.add(key)
            uniq.append((t, x))
    return pick(interior, n_interior), pick(uniq, n_boundary)
