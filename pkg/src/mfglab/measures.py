"""Particle measures, measure flows and path measures, with the d1 distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import OffGrid, SizeLimit
from .trajectory import Trajectory

WEIGHT_TOL = 1e-12
D1_LP_LIMIT = 5000


def _normalize_weights(weights, n):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise ValueError("weights and points differ in length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {total}, expected 1")
    return w / total


@dataclass(frozen=True)
class ParticleMeasure:
    """A finite weighted sum of Dirac masses; ``points`` has shape (m, dim)."""

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", _normalize_weights(weights, pts.shape[0]))

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def mean(self):
        return self.weights @ self.points


@dataclass(frozen=True)
class MeasureFlow:
    """Time-indexed particle ensembles sharing one weight vector.

    ``points`` has shape (n_times, n_atoms, dim); atom j carries ``weights[j]``
    at every time, as for the time marginals of a path measure.
    """

    times: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    def __init__(self, times, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 2:
            pts = pts[:, :, None]
        object.__setattr__(self, "times", np.asarray(times, dtype=float))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", _normalize_weights(weights, pts.shape[1]))
        if self.times.shape[0] != pts.shape[0]:
            raise ValueError("times and points disagree on the number of time nodes")

    @classmethod
    def static(cls, m0: ParticleMeasure, times):
        times = np.asarray(times, dtype=float)
        pts = np.repeat(m0.points[None, :, :], times.shape[0], axis=0)
        return cls(times, pts, m0.weights)

    @property
    def dim(self):
        return self.points.shape[2]

    @property
    def n_times(self):
        return self.times.shape[0]

    def index(self, t, tol=1e-9):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol:
            raise OffGrid(f"time {t} is not a node of the flow grid")
        return i

    def at(self, i) -> ParticleMeasure:
        return ParticleMeasure(self.points[i], self.weights)

    def at_time(self, t) -> ParticleMeasure:
        return self.at(self.index(t))

    def lipschitz_estimate(self):
        """max_i d1(m(t_i), m(t_{i+1})) / (t_{i+1} - t_i)."""
        d = flow_distances(
            MeasureFlow(self.times[:-1], self.points[:-1], self.weights),
            MeasureFlow(self.times[1:], self.points[1:], self.weights),
        )
        return float(np.max(d / np.diff(self.times)))

    def max_speed(self):
        v = np.linalg.norm(np.diff(self.points, axis=0), axis=2) / np.diff(self.times)[:, None]
        return float(v.max())


@dataclass(frozen=True)
class PathMeasure:
    """Weighted ensemble of trajectories on a shared grid; ``paths`` is (n_paths, n_times, dim)."""

    times: np.ndarray
    paths: np.ndarray
    weights: np.ndarray

    def __init__(self, times, paths, weights=None):
        p = np.asarray(paths, dtype=float)
        if p.ndim == 2:
            p = p[:, :, None]
        object.__setattr__(self, "times", np.asarray(times, dtype=float))
        object.__setattr__(self, "paths", p)
        object.__setattr__(self, "weights", _normalize_weights(weights, p.shape[0]))

    @classmethod
    def from_trajectories(cls, trajs, weights=None):
        times = trajs[0].times
        return cls(times, np.stack([tr.nodes for tr in trajs]), weights)

    def __len__(self):
        return self.paths.shape[0]

    @property
    def dim(self):
        return self.paths.shape[2]

    def trajectory(self, j) -> Trajectory:
        return Trajectory(float(self.times[0]), float(self.times[-1]), self.paths[j])

    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.times, np.transpose(self.paths, (1, 0, 2)), self.weights)

    def initial_measure(self) -> ParticleMeasure:
        return ParticleMeasure(self.paths[:, 0], self.weights)


def pushforward(eta: PathMeasure, t) -> ParticleMeasure:
    """Time marginal of ``eta`` at a grid time."""
    i = int(np.argmin(np.abs(eta.times - t)))
    if abs(eta.times[i] - t) > 1e-9:
        raise OffGrid(f"time {t} is not on the path grid")
    return ParticleMeasure(eta.paths[:, i], eta.weights)


def mix(eta: PathMeasure, other: PathMeasure, alpha: float) -> PathMeasure:
    """The mixture (1 - alpha) eta + alpha other as one weighted ensemble."""
    if eta.paths.shape[1:] != other.paths.shape[1:]:
        raise ValueError("path measures live on different grids")
    paths = np.concatenate([eta.paths, other.paths])
    w = np.concatenate([(1.0 - alpha) * eta.weights, alpha * other.weights])
    keep = w > 0
    return PathMeasure(eta.times, paths[keep], w[keep] / w[keep].sum())


def systematic_resample(eta: PathMeasure, n_keep: int, rng: np.random.Generator) -> PathMeasure:
    """Systematic resampling down to at most ``n_keep`` distinct paths; duplicates are merged."""
    if len(eta) <= n_keep:
        return eta
    u = (rng.random() + np.arange(n_keep)) / n_keep
    idx = np.searchsorted(np.cumsum(eta.weights), u, side="right")
    idx = np.minimum(idx, len(eta) - 1)
    uniq, counts = np.unique(idx, return_counts=True)
    return PathMeasure(eta.times, eta.paths[uniq], counts / counts.sum())


# -- Kantorovich-Rubinstein distance ---------------------------------------

def _d1_sorted(xa, wa, xb, wb):
    """Batched 1D d1 via the CDF formula; rows are independent problems."""
    x = np.concatenate([xa, xb], axis=-1)
    w = np.concatenate([wa, -wb], axis=-1)
    order = np.argsort(x, axis=-1, kind="stable")
    xs = np.take_along_axis(x, order, axis=-1)
    cw = np.cumsum(np.take_along_axis(w, order, axis=-1), axis=-1)
    return np.sum(np.abs(cw[..., :-1]) * np.diff(xs, axis=-1), axis=-1)


def _d1_lp(a: ParticleMeasure, b: ParticleMeasure):
    m, n = len(a), len(b)
    if m > D1_LP_LIMIT or n > D1_LP_LIMIT:
        raise SizeLimit(f"supports {m} x {n} exceed {D1_LP_LIMIT} x {D1_LP_LIMIT}")
    cost = np.linalg.norm(a.points[:, None, :] - b.points[None, :, :], axis=2).ravel()
    rows = sparse.kron(sparse.eye(m), np.ones((1, n)))
    cols = sparse.kron(np.ones((1, m)), sparse.eye(n))
    A = sparse.vstack([rows, cols]).tocsr()
    rhs = np.concatenate([a.weights, b.weights])
    res = linprog(cost, A_eq=A[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def kantorovich_d1(a: ParticleMeasure, b: ParticleMeasure, method: str = "auto") -> float:
    """Exact d1 with Euclidean ground cost (CDF formula in 1D, transport LP otherwise)."""
    if a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    if a.dim == 1 and method in ("auto", "cdf"):
        return float(_d1_sorted(a.points[:, 0], a.weights, b.points[:, 0], b.weights))
    return _d1_lp(a, b)


def flow_distances(fa: MeasureFlow, fb: MeasureFlow) -> np.ndarray:
    """d1(fa(t_i), fb(t_i)) for every grid time."""
    if fa.n_times != fb.n_times:
        raise ValueError("flows have different time grids")
    if fa.dim == 1:
        K = fa.n_times
        wa = np.broadcast_to(fa.weights, (K, fa.weights.shape[0]))
        wb = np.broadcast_to(fb.weights, (K, fb.weights.shape[0]))
        return _d1_sorted(fa.points[:, :, 0], wa, fb.points[:, :, 0], wb)
    return np.array([kantorovich_d1(fa.at(i), fb.at(i)) for i in range(fa.n_times)])
