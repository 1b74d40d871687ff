"""The value function u(t, x) and numerical probes of its nonsmooth structure.

Values come from :func:`solve_trajectory` with a fixed number of grid steps
for every starting time, which keeps the discrete value smooth in t.  The
superdifferential is estimated by linear programming: a covector q = (q_t, q_x)
supports u at z = (t, x) when

    u(y) - u(z) - <q, y - z> <= C |y - z|^{3/2}

on all probes y, with C the smallest constant for which such q exist.
"""

from __future__ import annotations

import csv
import io
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DegenerateProbeSet, NotInCone, OutOfWindow
from .trajopt import OptimalControlProblem, fmt, solve_trajectory

KEY_DIGITS = 12
# extra room on the fitted support constant, relative and absolute
C_SLACK_REL = 1e-6
VALUE_NOISE = 1e-9


def default_threads():
    try:
        return max(1, int(os.environ.get("MFGLAB_THREADS", "1")))
    except ValueError:
        return 1


class ValueSampler:
    """Cached evaluator of u(t, x) = inf J_t[gamma] over paths from x at time t.

    Build it from a control problem, or with :meth:`synthetic` from a plain
    callable ``fn(t, x)`` for testing the probes on known functions.
    """

    def __init__(self, prob: OptimalControlProblem | None, n_steps=None, eps_frac=0.1,
                 tol=1e-8, threads=None, synthetic=None, dom=None, T=None):
        self.prob = prob
        self.dom = dom if dom is not None else prob.dom
        self.T = float(T if T is not None else prob.T)
        self.n_steps = int(n_steps or (prob.n_steps if prob is not None else 0))
        self.eps = eps_frac * self.T
        self.tol = tol
        self.threads = threads or default_threads()
        self._fn = synthetic
        self._cache = {}
        self._solutions = {}
        self._lock = threading.Lock()

    @classmethod
    def synthetic(cls, fn, dom, T=1.0, eps_frac=0.1):
        return cls(None, eps_frac=eps_frac, synthetic=fn, dom=dom, T=T)

    @property
    def dim(self):
        return self.dom.dim

    def _key(self, t, x):
        return (round(float(t), KEY_DIGITS), tuple(round(float(c), KEY_DIGITS) for c in np.atleast_1d(x)))

    def __len__(self):
        return len(self._cache)

    def cached_items(self):
        with self._lock:
            return list(self._cache.items())

    def solve(self, t, x, hint=None):
        """Full solver output at (t, x); cached.  Not available for synthetic samplers.

        ``hint`` is an optional ``(times, nodes)`` path from (t, x), typically the
        tail of an optimal path through (t, x).  It is resampled onto the
        sampler grid and used as the warm start in place of the multi-start.
        """
        if self.prob is None:
            raise ValueError("synthetic samplers have no trajectories")
        key = self._key(t, x)
        with self._lock:
            hit = self._solutions.get(key)
        if hit is not None:
            return hit
        x = np.atleast_1d(np.asarray(x, dtype=float))
        warm = None
        if hint is not None:
            ht, hy = hint
            hy = np.asarray(hy, dtype=float).reshape(len(ht), -1)
            grid = np.linspace(float(t), self.T, self.n_steps + 1)
            warm = np.column_stack([np.interp(grid, ht, hy[:, i]) for i in range(hy.shape[1])])
        out = solve_trajectory(self.prob, float(t), x, n_steps=self.n_steps, tol=self.tol, warm=warm)
        with self._lock:
            self._solutions.setdefault(key, out)
            self._cache.setdefault(key, out[2])
        return out

    def value(self, t, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        key = self._key(t, x)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self._fn is not None:
            val = float(self._fn(float(t), x))
        elif float(t) >= self.T - 1e-14:
            val = float(self.prob.g(x[None, :])[0])
        else:
            val = self.solve(t, x)[2]
        with self._lock:
            self._cache.setdefault(key, val)
        return val

    def values(self, points):
        """Evaluate a list of (t, x) pairs; results keep the input order."""
        points = list(points)
        if self.threads <= 1 or len(points) < 2:
            return np.array([self.value(t, x) for t, x in points])
        with ThreadPoolExecutor(max_workers=self.threads) as ex:
            return np.array(list(ex.map(lambda tx: self.value(*tx), points)))

    def gradient(self, t, x):
        """Exact x-gradient of the discrete value (the dual arc at the start)."""
        return self.solve(t, x)[1].value_gradient

    def hamiltonian_f(self, t, x, p):
        """H(x, p) - F(x, m(t)), the Hamiltonian of the full running cost."""
        X = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
        P = np.atleast_1d(np.asarray(p, dtype=float))[None, :]
        F = self.prob.running.value(np.array([float(t)]), X)[0]
        return float(self.prob.ham.H(X, P)[0] - F)

    def lipschitz_estimate(self, pairs):
        """max |u(z1) - u(z2)| / |z1 - z2| over pairs of (t, x) points."""
        best = 0.0
        for (t1, x1), (t2, x2) in pairs:
            d = np.hypot(t1 - t2, np.linalg.norm(np.atleast_1d(x1) - np.atleast_1d(x2)))
            if d > 0:
                best = max(best, abs(self.value(t1, x1) - self.value(t2, x2)) / d)
        return best


def value(sampler: ValueSampler, t, x) -> float:
    return sampler.value(t, x)


# -- superdifferential -------------------------------------------------------

@dataclass
class SuperdiffEstimate:
    """Supporting covectors q = (q_t, q_x) at a base point.

    ``lower`` and ``upper`` bound each coordinate of q over the slope set
    (``-inf`` along the inward normal at boundary points).  At boundary
    points ``tangential_part`` is the centre of the bounded spatial part and
    the set is {tangential_part + lam * nu : lam <= lambda_max} in x.
    """

    base: tuple
    defect_constant: float
    lower: np.ndarray
    upper: np.ndarray
    offsets: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    boundary: bool = False
    normal: np.ndarray | None = None
    tangential_part: np.ndarray | None = None
    lambda_max: float | None = None
    time_slope: float = 0.0
    sign: int = 1
    normal_lower: float | None = None
    tangential_width: float | None = None

    @property
    def width(self) -> float:
        """Largest extent of the slope set over the bounded coordinates."""
        w = self.upper - self.lower
        return float(np.max(w[np.isfinite(w)])) if np.any(np.isfinite(w)) else np.inf

    def is_singleton(self, tol) -> bool:
        return self.width <= tol

    def center(self):
        return 0.5 * (self.lower + self.upper)

    def is_ray(self, tol) -> bool:
        """Boundary slope set of the form {p_tau + lam nu : lam <= lambda_max} up to ``tol``."""
        if not self.boundary:
            return False
        return (self.normal_lower == -np.inf and np.isfinite(self.lambda_max)
                and self.tangential_width <= tol)

    def contains(self, q, tol=1e-8) -> bool:
        """Check the supporting inequality for ``q`` on every probe."""
        q = np.asarray(q, dtype=float)
        lhs = self.sign * (self.offsets @ q)
        return bool(np.all(lhs >= self.rhs - tol * (1.0 + np.abs(self.rhs))))

    def slack(self, q):
        q = np.asarray(q, dtype=float)
        return float(np.min(self.sign * (self.offsets @ q) - self.rhs))


def probe_offsets(sampler: ValueSampler, t, x, r, with_time=True):
    """Two-scale probe stencil around (t, x); returns offsets (k, 1 + dim) of feasible probes."""
    dom = sampler.dom
    n = dom.dim
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if n == 1:
        dirs = np.array([[-1.0], [-0.75], [-0.5], [-0.25], [0.25], [0.5], [0.75], [1.0]])
    else:
        ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    on_bd = abs(dom.b(x)[0]) <= 1e-9
    if on_bd:
        nu = dom.normal(x)[0]
        dirs = dirs[dirs @ nu <= 1e-12]
    out = []
    taus = (-1.0, 0.0, 1.0) if with_time else (0.0,)
    for rho in (r, r / 4):
        spatial = [np.zeros(n)]
        for d in dirs:
            y = dom.nearest(x + rho * d)[0]
            spatial.append(y - x)
        for tau in taus:
            s = t + tau * rho
            if s < 0 or s > sampler.T - sampler.eps + 1e-12:
                continue
            for h in spatial:
                if tau == 0 and not np.any(h):
                    continue
                out.append(np.concatenate([[tau * rho], h]))
    off = np.array(out)
    if off.shape[0] < n + 1 or np.linalg.matrix_rank(off) < (n + 1 if with_time else n):
        raise DegenerateProbeSet("probe offsets do not span the space")
    return off


def _min_constant(A, b, weights):
    """min C such that A q >= b - C * weights has a solution q (an LP in (q, C))."""
    k, m = A.shape
    c = np.zeros(m + 1)
    c[-1] = 1.0
    A_ub = np.hstack([-A, -weights[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=-b, bounds=[(None, None)] * m + [(0, None)], method="highs")
    if res.status != 0:
        raise DegenerateProbeSet(f"support LP failed: {res.message}")
    return float(res.x[-1])


def _extent(A, b, direction):
    """(min, max) of <direction, q> over {q : A q >= b}; infinite when unbounded."""
    m = A.shape[1]
    out = []
    for sgn in (1.0, -1.0):
        res = linprog(sgn * direction, A_ub=-A, b_ub=-b, bounds=[(None, None)] * m, method="highs")
        if res.status == 3:
            out.append(-np.inf if sgn > 0 else np.inf)
        elif res.status == 0:
            out.append(sgn * res.fun)
        else:
            raise DegenerateProbeSet(f"extent LP failed: {res.message}")
    return out[0], out[1]


def _support_set(sampler, t, x, r, sign, with_time=True):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    off = probe_offsets(sampler, t, x, r, with_time)
    if not with_time:
        off = off[:, 1:]
    pts = [(t + (o[0] if with_time else 0.0), x + o[-sampler.dim:]) for o in off]
    du = sampler.values(pts) - sampler.value(t, x)
    dist = np.linalg.norm(off, axis=1)
    w = dist**1.5
    # supporting from above (sign=+1): <q, d> >= du - C w ; from below: -<q, d> >= -du - C w
    A = sign * off
    b = sign * du
    C = _min_constant(A, b, w)
    C_use = C * (1 + C_SLACK_REL) + VALUE_NOISE / w.min()
    rhs = b - C_use * w
    return off, A, rhs, C_use


def _estimate(sampler, t, x, r, n_probe, sign, with_time):
    off, A, rhs, C_use = _support_set(sampler, t, x, r, sign, with_time)
    if off.shape[0] < n_probe:
        raise DegenerateProbeSet(f"only {off.shape[0]} feasible probes, need {n_probe}")
    m = off.shape[1]
    lower, upper = np.empty(m), np.empty(m)
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        lower[j], upper[j] = _extent(A, rhs, e)
    extra = {}
    dom = sampler.dom
    if abs(dom.b(x)[0]) <= 1e-9:
        nu = dom.normal(x)[0]
        k0 = 1 if with_time else 0
        enu = np.zeros(m)
        enu[k0:] = nu
        extra["normal_lower"], extra["lambda_max"] = _extent(A, rhs, enu)
        tb = dom.tangent_basis(x)[0]
        tang = []
        for j in range(tb.shape[1]):
            e = np.zeros(m)
            e[k0:] = tb[:, j]
            tang.append(_extent(A, rhs, e))
        extra["tangential"] = tang
    return off, rhs, C_use, lower, upper, extra


def _richardson(coarse, fine):
    """Cancel a bias of order r^{1/2} between scales r and r/4."""
    if not (np.isfinite(coarse) and np.isfinite(fine)):
        return fine
    return 2.0 * fine - coarse


def superdifferential(sampler: ValueSampler, t, x, r=0.02, n_probe=20, sign=1, with_time=True,
                      extrapolate=False) -> SuperdiffEstimate:
    """Estimate D^+u(t, x) (``sign=1``) or D^-u(t, x) (``sign=-1``) from probed values.

    With the smallest feasible C, a 3/2-power term in u shifts the slope
    bounds by O(r^{1/2}).  ``extrapolate=True`` repeats the fit at r/4 and
    removes that term from the reported bounds by Richardson extrapolation.
    """
    if t >= sampler.T:
        raise OutOfWindow("the base time must be before T")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    off, rhs, C_use, lower, upper, extra = _estimate(sampler, t, x, r, n_probe, sign, with_time)
    if extrapolate:
        _, _, _, lo4, up4, extra4 = _estimate(sampler, t, x, r / 4, n_probe, sign, with_time)
        lower = np.array([_richardson(a, b) for a, b in zip(lower, lo4)])
        upper = np.array([_richardson(a, b) for a, b in zip(upper, up4)])
        swap = lower > upper
        mid = 0.5 * (lower + upper)
        lower = np.where(swap, mid, lower)
        upper = np.where(swap, mid, upper)
        if extra:
            extra["lambda_max"] = _richardson(extra["lambda_max"], extra4["lambda_max"])
            extra["tangential"] = [(_richardson(a[0], b[0]), _richardson(a[1], b[1]))
                                   for a, b in zip(extra["tangential"], extra4["tangential"])]
    if extra and sign == 1 and sampler.dim > 1:
        # near-tangent stencil directions leave the tangential slope loose; use the
        # one-sided derivatives along the boundary, min and max of <q, tau> over D^+u
        tb = sampler.dom.tangent_basis(x)[0]
        extra["tangential"] = [(directional_derivative(sampler, t, x, tb[:, j]),
                                -directional_derivative(sampler, t, x, -tb[:, j])) for j in range(tb.shape[1])]
    est = SuperdiffEstimate((float(t), tuple(x)), C_use, lower, upper, off, rhs, sign=sign)
    if extra:
        dom = sampler.dom
        est.boundary = True
        est.normal = dom.normal(x)[0]
        est.lambda_max = float(extra["lambda_max"])
        est.normal_lower = float(extra["normal_lower"])
        est.tangential_width = max([hi - lo for lo, hi in extra["tangential"]], default=0.0)
        tb = dom.tangent_basis(x)[0]
        tang = np.zeros(dom.dim)
        for j, (lo, hi) in enumerate(extra["tangential"]):
            tang += 0.5 * (lo + hi) * tb[:, j]
        est.tangential_part = tang
    if with_time:
        est.time_slope = 0.5 * (lower[0] + upper[0]) if np.isfinite(lower[0] + upper[0]) else np.nan
    return est


def supporting_constant(sampler: ValueSampler, t, x, q, r=0.02, with_time=True) -> float:
    """Smallest C with u(y) - u(z) - <q, y - z> <= C |y - z|^{3/2} on the probe stencil."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    off = probe_offsets(sampler, t, x, r, with_time)
    if not with_time:
        off = off[:, 1:]
    pts = [(t + (o[0] if with_time else 0.0), x + o[-sampler.dim:]) for o in off]
    du = sampler.values(pts) - sampler.value(t, x)
    return float(max(0.0, np.max((du - off @ q) / np.linalg.norm(off, axis=1) ** 1.5)))


def subdifferential(sampler: ValueSampler, t, x, r=0.02, n_probe=20, with_time=True) -> SuperdiffEstimate:
    return superdifferential(sampler, t, x, r, n_probe, sign=-1, with_time=with_time)


def directional_derivative(sampler: ValueSampler, t, x, theta, s0=None) -> float:
    """One-sided derivative of u(t, .) at x along theta, by extrapolated forward quotients.

    Quotients at s0, s0/4, s0/16 are combined to cancel error terms of order
    s^{1/2} and s, which covers the 3/2-power behaviour near the boundary.
    """
    dom = sampler.dom
    x = np.atleast_1d(np.asarray(x, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if abs(dom.b(x)[0]) <= 1e-9:
        nu = dom.normal(x)[0]
        if theta @ nu > 1e-12:
            raise NotInCone(f"<theta, nu> = {theta @ nu:.3e} > 0 at a boundary point")
    if s0 is None:
        s0 = 1e-2 * dom.diameter / max(np.linalg.norm(theta), 1e-300)
    u0 = sampler.value(t, x)

    def q(s):
        y = dom.nearest(x + s * theta)[0]
        return (sampler.value(t, y) - u0) / s

    q1, q2, q3 = q(s0), q(s0 / 4), q(s0 / 16)
    r1 = 2 * q2 - q1
    r2 = 2 * q3 - q2
    return float((4 * r2 - r1) / 3)


def min_over_slopes(est: SuperdiffEstimate, theta) -> float:
    """min <q_x, theta> over the estimated slope set.

    At boundary points this is the ray {p_tau + lam nu : lam <= lambda_max};
    elsewhere an LP over the probe inequalities.  The raw inequalities at a
    boundary point carry an O(r^{1/2}) bias along the normal.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if est.boundary and est.lambda_max is not None and np.isfinite(est.lambda_max):
        dn = float(theta @ est.normal)
        if dn > 1e-12:
            return -np.inf
        return float(theta @ est.tangential_part) + est.lambda_max * dn
    m = est.offsets.shape[1]
    d = np.zeros(m)
    d[m - theta.shape[0]:] = theta
    lo, _ = _extent(est.sign * est.offsets, est.rhs, d)
    return lo


# -- sensitivity and semiconcavity probes ---------------------------------------

def _check_window(sampler, s, y):
    if s < -1e-14 or s > sampler.T - sampler.eps + 1e-12:
        raise OutOfWindow(f"time {s:.6g} is outside [0, T - eps]")
    if sampler.dom.b(y)[0] > 1e-12:
        raise OutOfWindow("probe point leaves the closed domain")


def sensitivity_probe(sampler: ValueSampler, t, x, dual_p, h, sigma) -> float:
    """u(t+s, x+h) - u(t, x) - s (H - F)(x, p) - <p, h> for the dual arc p at time t."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    p = np.atleast_1d(np.asarray(dual_p, dtype=float))
    if sigma == 0 and not np.any(h):
        return 0.0
    _check_window(sampler, t, x)
    _check_window(sampler, t + sigma, x + h)
    du = sampler.value(t + sigma, x + h) - sampler.value(t, x)
    return float(du - sigma * sampler.hamiltonian_f(t, x, p) - p @ h)


def semiconcavity_probe(sampler: ValueSampler, t, x, h, sigma) -> float:
    """Centred defect u(t+s, x+h)/2 + u(t-s, x-h)/2 - u(t, x)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if sigma == 0 and not np.any(h):
        return 0.0
    for s, y in ((t, x), (t + sigma, x + h), (t - sigma, x - h)):
        _check_window(sampler, s, y)
    vals = sampler.values([(t + sigma, x + h), (t - sigma, x - h), (t, x)])
    return float(0.5 * vals[0] + 0.5 * vals[1] - vals[2])


def fit_power_law(scales, defects):
    """Least-squares fit of |defect| ~ c * scale^alpha; returns (alpha, c)."""
    s = np.asarray(scales, dtype=float)
    d = np.abs(np.asarray(defects, dtype=float))
    keep = (s > 0) & (d > 0)
    if keep.sum() < 2:
        return np.nan, 0.0
    alpha, logc = np.polyfit(np.log(s[keep]), np.log(d[keep]), 1)
    return float(alpha), float(np.exp(logc))


def dyadic_scales(k_min=3, k_max=9):
    return [2.0**-k for k in range(k_min, k_max + 1)]


def sweep_csv(rows) -> str:
    """CSV of probe sweeps; rows are dicts with keys label, r, defect, alpha, c."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "r", "defect", "alpha", "c"])
    for row in rows:
        w.writerow([row["label"], fmt(row["r"]), fmt(row["defect"]), fmt(row["alpha"]), fmt(row["c"])])
    return buf.getvalue()
