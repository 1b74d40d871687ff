"""Lagrangians, their Legendre transforms and the mean-field couplings.

The Hamiltonian follows the sign convention
``H(x, p) = sup_v { -<p, v> - L(x, v) }``, so the optimal velocity is
``v* = -D_pH(x, p)``.  Every evaluator takes point arrays of shape (m, dim).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import BracketFailure, NoConvergence, NotBoundary
from .fields import AffineVectorField, ScalarField, parse_spec
from .geometry import Domain
from .measures import MeasureFlow, ParticleMeasure

NEWTON_MAX_ITER = 100
LAMBDA_BRACKET_MAX = 1e6
BOUNDARY_TOL = 1e-9


def _pts(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(1, dim) if x.size == dim else x.reshape(-1, dim)
    return x


@dataclass(frozen=True)
class CustomLagrangian:
    """User-supplied convex Lagrangian with analytic velocity derivatives.

    Callables act on arrays ``(X, V)`` of shape (m, dim) and return (m,),
    (m, dim) or (m, dim, dim).  ``dxx`` and ``dxv`` fall back to central
    differences of ``dx`` when omitted.
    """

    L: Callable
    dx: Callable
    dv: Callable
    dvv: Callable
    dxx: Optional[Callable] = None
    dxv: Optional[Callable] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)


def softabs_lagrangian(eps=0.5, potential: ScalarField | None = None) -> CustomLagrangian:
    """L = |v|^2/2 + eps * sum_i sqrt(1 + v_i^2) + l(x); D_vvL lies between I and (1+eps)I."""
    pot = potential

    def L(X, V):
        out = 0.5 * np.sum(V * V, axis=1) + eps * np.sum(np.sqrt(1.0 + V * V), axis=1)
        return out + (pot.value(X) if pot is not None else 0.0)

    def dx(X, V):
        return pot.grad(X) if pot is not None else np.zeros_like(X)

    def dv(X, V):
        return V + eps * V / np.sqrt(1.0 + V * V)

    def dvv(X, V):
        d = 1.0 + eps * (1.0 + V * V) ** -1.5
        return d[:, :, None] * np.eye(V.shape[1])

    def dxx(X, V):
        if pot is not None:
            return pot.hess(X)
        return np.zeros((X.shape[0], X.shape[1], X.shape[1]))

    def dxv(X, V):
        return np.zeros((X.shape[0], X.shape[1], X.shape[1]))

    return CustomLagrangian(L, dx, dv, dvv, dxx, dxv, name="softabs",
                            params={"eps": eps, "potential": pot.label if pot is not None else "zero"})


@dataclass(frozen=True)
class LagrangianSpec:
    """A Lagrangian of one of three kinds.

    ``quadratic``: |v|^2/2 + l(x).  ``drift-quadratic``: |v - b(x)|^2/2 + l(x)
    with affine b.  ``custom-convex``: a :class:`CustomLagrangian`.
    """

    kind: str
    dim: int
    potential: ScalarField
    drift: AffineVectorField | None = None
    custom: CustomLagrangian | None = None
    mu: float = 1.0

    @classmethod
    def quadratic(cls, dim, potential="zero"):
        pot = potential if isinstance(potential, ScalarField) else ScalarField.from_spec(potential, dim)
        return cls("quadratic", dim, pot)

    @classmethod
    def drift_quadratic(cls, dim, drift, potential="zero"):
        pot = potential if isinstance(potential, ScalarField) else ScalarField.from_spec(potential, dim)
        b = drift if isinstance(drift, AffineVectorField) else AffineVectorField.from_spec(drift, dim)
        return cls("drift-quadratic", dim, pot, drift=b)

    @classmethod
    def custom_convex(cls, dim, custom: CustomLagrangian, mu: float):
        if mu < 1:
            raise ValueError("mu must be at least 1")
        return cls("custom-convex", dim, ScalarField.from_spec("zero", dim), custom=custom, mu=float(mu))

    @classmethod
    def from_config(cls, spec: dict, dim: int):
        kind = spec.get("kind", "quadratic")
        pot = spec.get("potential", "zero")
        if kind == "quadratic":
            return cls.quadratic(dim, pot)
        if kind == "drift-quadratic":
            return cls.drift_quadratic(dim, spec.get("drift", "zero"), pot)
        if kind == "custom-convex":
            name = spec.get("name", "softabs")
            if name != "softabs":
                raise ValueError(f"unknown built-in custom Lagrangian {name!r}")
            eps = float(spec.get("eps", 0.5))
            potf = ScalarField.from_spec(pot, dim)
            return cls.custom_convex(dim, softabs_lagrangian(eps, None if potf.is_zero() else potf), 1.0 + eps)
        raise ValueError(f"unknown lagrangian kind {kind!r}")

    def to_config(self) -> dict:
        out = {"kind": self.kind, "potential": self.potential.label}
        if self.kind == "drift-quadratic":
            out["drift"] = self.drift.label
        if self.kind == "custom-convex":
            out["name"] = self.custom.name
            out.update(self.custom.params)
        return out

    # -- L and its derivatives --------------------------------------------
    def L(self, X, V):
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        if self.kind == "custom-convex":
            return self.custom.L(X, V)
        W = V - self.drift.value(X) if self.kind == "drift-quadratic" else V
        return 0.5 * np.sum(W * W, axis=1) + self.potential.value(X)

    def D_v(self, X, V):
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        if self.kind == "custom-convex":
            return self.custom.dv(X, V)
        return V - self.drift.value(X) if self.kind == "drift-quadratic" else V.copy()

    def D_x(self, X, V):
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        if self.kind == "custom-convex":
            return self.custom.dx(X, V)
        g = self.potential.grad(X)
        if self.kind == "drift-quadratic":
            W = V - self.drift.value(X)
            g = g - np.einsum("mji,mj->mi", self.drift.jacobian(X), W)
        return g

    def D_vv(self, X, V):
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        if self.kind == "custom-convex":
            return self.custom.dvv(X, V)
        return np.broadcast_to(np.eye(self.dim), (X.shape[0], self.dim, self.dim)).copy()

    def D_xv(self, X, V):
        """Mixed second derivatives, entry [i, j] = d^2 L / dx_i dv_j."""
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        if self.kind == "custom-convex":
            if self.custom.dxv is not None:
                return self.custom.dxv(X, V)
            return _fd_jacobian(lambda Vs: self.custom.dx(X, Vs), V).transpose(0, 2, 1)
        if self.kind == "drift-quadratic":
            return -np.transpose(self.drift.jacobian(X), (0, 2, 1)).copy()
        return np.zeros((X.shape[0], self.dim, self.dim))

    def D_xx(self, X, V):
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        if self.kind == "custom-convex":
            if self.custom.dxx is not None:
                return self.custom.dxx(X, V)
            return _fd_jacobian(lambda Xs: self.custom.dx(Xs, V), X)
        h = self.potential.hess(X)
        if self.kind == "drift-quadratic":
            J = self.drift.jacobian(X)
            h = h + np.einsum("mki,mkj->mij", J, J)
        return h

    def convexity_bounds(self, X, V):
        """Extreme eigenvalues of D_vvL over the samples."""
        ev = np.linalg.eigvalsh(self.D_vv(X, V))
        return float(ev.min()), float(ev.max())

    def check_convexity(self, X, V, tol=1e-8):
        lo, hi = self.convexity_bounds(X, V)
        return lo >= 1.0 / self.mu - tol and hi <= self.mu + tol

    def growth_constant(self, X):
        """Sampled M with |L(x,0)| + |D_xL(x,0)| + |D_vL(x,0)| <= M."""
        X = _pts(X, self.dim)
        Z = np.zeros_like(X)
        vals = (np.abs(self.L(X, Z)) + np.linalg.norm(self.D_x(X, Z), axis=1)
                + np.linalg.norm(self.D_v(X, Z), axis=1))
        return float(vals.max())


def _fd_jacobian(fun, Y, h=1e-6):
    """Central-difference Jacobian of a vectorised map, entry [m, i, j] = d fun_i / d y_j."""
    m, n = Y.shape
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        cols.append((fun(Y + e) - fun(Y - e)) / (2 * h))
    return np.stack(cols, axis=2)


# -- Hamiltonian ------------------------------------------------------------

@dataclass(frozen=True)
class Hamiltonian:
    """The Legendre transform of a :class:`LagrangianSpec`."""

    lag: LagrangianSpec

    @property
    def dim(self):
        return self.lag.dim

    @property
    def mu(self):
        return self.lag.mu

    def maximizer(self, X, P):
        """The unique v* maximizing -<p, v> - L(x, v), i.e. solving D_vL(x, v) = -p."""
        X, P = _pts(X, self.dim), _pts(P, self.dim)
        lag = self.lag
        if lag.kind == "quadratic":
            return -P
        if lag.kind == "drift-quadratic":
            return lag.drift.value(X) - P
        V = np.zeros_like(P)
        obj = -np.sum(P * V, axis=1) - lag.L(X, V)
        for _ in range(NEWTON_MAX_ITER):
            grad = -P - lag.D_v(X, V)
            if np.max(np.abs(grad)) <= 1e-13 * (1.0 + np.max(np.abs(P))):
                return V
            step = np.linalg.solve(lag.D_vv(X, V), grad[:, :, None])[:, :, 0]
            t = np.ones(X.shape[0])
            for _ in range(40):
                Vn = V + t[:, None] * step
                objn = -np.sum(P * Vn, axis=1) - lag.L(X, Vn)
                bad = objn < obj - 1e-14 * (1.0 + np.abs(obj))
                if not np.any(bad):
                    break
                t = np.where(bad, 0.5 * t, t)
            V, obj = Vn, objn
        grad = -P - lag.D_v(X, V)
        if np.max(np.abs(grad)) > 1e-9 * (1.0 + np.max(np.abs(P))):
            raise NoConvergence(f"Legendre Newton stalled with residual {np.max(np.abs(grad)):.3e}")
        return V

    def H(self, X, P):
        X, P = _pts(X, self.dim), _pts(P, self.dim)
        lag = self.lag
        if lag.kind == "quadratic":
            return 0.5 * np.sum(P * P, axis=1) - lag.potential.value(X)
        if lag.kind == "drift-quadratic":
            return 0.5 * np.sum(P * P, axis=1) - np.sum(P * lag.drift.value(X), axis=1) - lag.potential.value(X)
        V = self.maximizer(X, P)
        return -np.sum(P * V, axis=1) - lag.L(X, V)

    def D_p(self, X, P):
        return -self.maximizer(X, P)

    def D_x(self, X, P):
        X, P = _pts(X, self.dim), _pts(P, self.dim)
        lag = self.lag
        if lag.kind == "quadratic":
            return -lag.potential.grad(X)
        if lag.kind == "drift-quadratic":
            return -np.einsum("mji,mj->mi", lag.drift.jacobian(X), P) - lag.potential.grad(X)
        return -lag.D_x(X, self.maximizer(X, P))

    def D_pp(self, X, P):
        X, P = _pts(X, self.dim), _pts(P, self.dim)
        if self.lag.kind != "custom-convex":
            return np.broadcast_to(np.eye(self.dim), (X.shape[0], self.dim, self.dim)).copy()
        return np.linalg.inv(self.lag.D_vv(X, self.maximizer(X, P)))

    def legendre_gap(self, X, P):
        """|H(x,p) + L(x,v*) + <p,v*>|, which vanishes at the maximizer."""
        X, P = _pts(X, self.dim), _pts(P, self.dim)
        V = self.maximizer(X, P)
        return np.abs(self.H(X, P) + self.lag.L(X, V) + np.sum(P * V, axis=1))

    def dual_L(self, X, V):
        """Transform back: sup_p { -<p, v> - H(x, p) }, maximized at p = -D_vL(x, v)."""
        X, V = _pts(X, self.dim), _pts(V, self.dim)
        P = -self.lag.D_v(X, V)
        return -np.sum(P * V, axis=1) - self.H(X, P)


def legendre(lag: LagrangianSpec, x, p):
    """Return (H(x,p), v*) for a single point."""
    ham = Hamiltonian(lag)
    v = ham.maximizer(x, p)
    h = -float(np.sum(_pts(p, lag.dim) * v)) - float(lag.L(x, v)[0])
    return h, v[0]


def _require_boundary(dom: Domain, x):
    bx = float(dom.b(x)[0])
    if abs(bx) > BOUNDARY_TOL:
        raise NotBoundary(f"point with b={bx:.3e} is not on the boundary")


def tangential_hamiltonian(ham: Hamiltonian, dom: Domain, x, p) -> float:
    """sup over tangent velocities v of -<p, v> - L(x, v) at a boundary point."""
    _require_boundary(dom, x)
    X = _pts(x, dom.dim)
    P = _pts(p, dom.dim)
    T = dom.tangent_basis(X)[0]
    lag = ham.lag
    if T.shape[1] == 0:
        return float(-lag.L(X, np.zeros_like(X))[0])
    q = T.T @ P[0]
    if lag.kind == "quadratic":
        w = -q
    elif lag.kind == "drift-quadratic":
        w = T.T @ lag.drift.value(X)[0] - q
    else:
        w = np.zeros(T.shape[1])
        for _ in range(NEWTON_MAX_ITER):
            V = (T @ w)[None, :]
            g = -q - T.T @ lag.D_v(X, V)[0]
            if np.max(np.abs(g)) <= 1e-13 * (1.0 + np.max(np.abs(q))):
                break
            Hm = T.T @ lag.D_vv(X, V)[0] @ T
            w = w + np.linalg.solve(Hm, g)
        else:
            raise NoConvergence("tangential Legendre Newton did not converge")
    V = (T @ w)[None, :]
    return float(-np.sum(P * V) - lag.L(X, V)[0])


def lambda_plus(ham: Hamiltonian, dom: Domain, x, p_tau, tol=1e-10) -> float:
    """Root of phi(lam) = <D_pH(x, p_tau + lam nu), nu>, which is increasing in lam."""
    _require_boundary(dom, x)
    X = _pts(x, dom.dim)
    nu = dom.normal(X)[0]
    pt = np.atleast_1d(np.asarray(p_tau, dtype=float))
    if abs(float(pt @ nu)) > 1e-8 * (1.0 + np.linalg.norm(pt)):
        raise ValueError("p_tau is not tangent to the boundary")

    def phi(lam):
        return float(ham.D_p(X, (pt + lam * nu)[None, :])[0] @ nu)

    lo, hi = -1.0, 1.0
    flo, fhi = phi(lo), phi(hi)
    while flo > 0 or fhi < 0:
        if max(abs(lo), hi) >= LAMBDA_BRACKET_MAX:
            raise BracketFailure("phi has no sign change for |lambda| <= 1e6")
        if flo > 0:
            lo *= 2.0
            flo = phi(lo)
        if fhi < 0:
            hi *= 2.0
            fhi = phi(hi)
    lam = 0.5 * (lo + hi)
    for _ in range(200):
        f = phi(lam)
        if abs(f) <= tol:
            return lam
        if f > 0:
            hi = lam
        else:
            lo = lam
        dphi = float(nu @ ham.D_pp(X, (pt + lam * nu)[None, :])[0] @ nu)
        newton = lam - f / dphi
        lam = newton if lo < newton < hi else 0.5 * (lo + hi)
    f = phi(lam)
    if abs(f) > tol:
        raise NoConvergence(f"lambda_plus stalled with |phi|={abs(f):.3e}")
    return lam


# -- couplings ----------------------------------------------------------------

@dataclass(frozen=True)
class GaussianKernel:
    """F(x, m) = strength * (rho_sigma * m)(x) with the normalised Gaussian rho_sigma."""

    sigma: float
    strength: float
    dim: int

    @property
    def norm(self):
        return (2.0 * np.pi * self.sigma**2) ** (-self.dim / 2.0)

    @property
    def kappa(self):
        """Lipschitz constant of x -> F(x, m), which bounds the d1-Lipschitz constant in m."""
        return self.strength * self.norm * np.exp(-0.5) / self.sigma

    def _diff(self, X, atoms):
        return X[:, None, :] - atoms[None, :, :]

    def value(self, X, atoms, weights):
        d = self._diff(X, atoms)
        e = np.exp(-np.sum(d * d, axis=2) / (2 * self.sigma**2))
        return self.strength * self.norm * (e @ weights)

    def grad(self, X, atoms, weights):
        d = self._diff(X, atoms)
        e = np.exp(-np.sum(d * d, axis=2) / (2 * self.sigma**2)) * weights
        return -self.strength * self.norm / self.sigma**2 * np.einsum("ma,mai->mi", e, d)

    def hess(self, X, atoms, weights):
        d = self._diff(X, atoms)
        s2 = self.sigma**2
        e = np.exp(-np.sum(d * d, axis=2) / (2 * s2)) * weights
        outer = np.einsum("ma,mai,maj->mij", e, d, d) / s2
        return self.strength * self.norm / s2 * (outer - e.sum(axis=1)[:, None, None] * np.eye(X.shape[1]))


@dataclass(frozen=True)
class Coupling:
    """Running coupling F(x, m) and terminal coupling G(x, m).

    ``form`` is ``zero``, ``kernel`` (Gaussian smoothing of m) or ``field``
    (an m-independent potential).  The terminal coupling is an
    m-independent scalar field ``terminal``.
    """

    form: str
    dim: int
    kernel: GaussianKernel | None = None
    field: ScalarField | None = None
    terminal: ScalarField | None = None

    @classmethod
    def from_config(cls, spec: dict, terminal, dim: int):
        term = terminal if isinstance(terminal, ScalarField) else ScalarField.from_spec(terminal, dim)
        form = spec.get("form", "zero")
        if form == "zero":
            return cls("zero", dim, terminal=term)
        if form == "kernel":
            k = GaussianKernel(float(spec.get("sigma", 0.2)), float(spec.get("strength", 1.0)), dim)
            if k.sigma <= 0:
                raise ValueError("kernel sigma must be positive")
            return cls("kernel", dim, kernel=k, terminal=term)
        if form == "field":
            return cls("field", dim, field=ScalarField.from_spec(spec["field"], dim), terminal=term)
        raise ValueError(f"unknown coupling form {form!r}")

    def to_config(self) -> dict:
        if self.form == "kernel":
            return {"form": "kernel", "sigma": self.kernel.sigma, "strength": self.kernel.strength}
        if self.form == "field":
            return {"form": "field", "field": self.field.label}
        return {"form": "zero"}

    @property
    def kappa(self) -> float:
        return self.kernel.kappa if self.form == "kernel" else 0.0

    @property
    def is_zero(self):
        return self.form == "zero" or (self.form == "field" and self.field.is_zero())

    def F(self, X, m: ParticleMeasure):
        X = _pts(X, self.dim)
        if self.form == "kernel":
            return self.kernel.value(X, m.points, m.weights)
        if self.form == "field":
            return self.field.value(X)
        return np.zeros(X.shape[0])

    def D_xF(self, X, m: ParticleMeasure):
        X = _pts(X, self.dim)
        if self.form == "kernel":
            return self.kernel.grad(X, m.points, m.weights)
        if self.form == "field":
            return self.field.grad(X)
        return np.zeros_like(X)

    def D2_xF(self, X, m: ParticleMeasure):
        X = _pts(X, self.dim)
        if self.form == "kernel":
            return self.kernel.hess(X, m.points, m.weights)
        if self.form == "field":
            return self.field.hess(X)
        return np.zeros((X.shape[0], self.dim, self.dim))

    def G(self, X, m: ParticleMeasure | None = None):
        return self.terminal.value(_pts(X, self.dim))

    def D_xG(self, X, m: ParticleMeasure | None = None):
        return self.terminal.grad(_pts(X, self.dim))

    def D2_xG(self, X, m: ParticleMeasure | None = None):
        return self.terminal.hess(_pts(X, self.dim))

    def frozen(self, flow: MeasureFlow | None, dom: Domain, grid_points: int = 801) -> "RunningCost":
        """F(., m(t)) along ``flow`` as a running cost for the trajectory solver."""
        if self.form == "zero":
            return ZeroRunning(self.dim)
        if self.form == "field":
            return FieldRunning(self.field)
        if flow is None:
            raise ValueError("kernel coupling needs a measure flow")
        if self.dim == 1:
            return KernelGrid1D.build(self.kernel, flow, dom, grid_points)
        return KernelExact(self.kernel, flow)


# -- running costs along a frozen flow -----------------------------------------

class RunningCost:
    """Interface: ``evaluate(times, X)`` returns values (m,), gradients (m, n) and Hessians (m, n, n)."""

    dim: int

    def evaluate(self, times, X):
        raise NotImplementedError

    def value(self, times, X):
        return self.evaluate(times, X)[0]


@dataclass(frozen=True)
class ZeroRunning(RunningCost):
    dim: int

    def evaluate(self, times, X):
        m = X.shape[0]
        return np.zeros(m), np.zeros((m, self.dim)), np.zeros((m, self.dim, self.dim))


@dataclass(frozen=True)
class FieldRunning(RunningCost):
    field: ScalarField

    @property
    def dim(self):
        return len(self.field.a)

    def evaluate(self, times, X):
        return self.field.value(X), self.field.grad(X), self.field.hess(X)


def _time_weights(flow_times, times):
    i = np.clip(np.searchsorted(flow_times, times, side="right") - 1, 0, len(flow_times) - 2)
    th = (times - flow_times[i]) / (flow_times[i + 1] - flow_times[i])
    return i, np.clip(th, 0.0, 1.0)


@dataclass(frozen=True)
class KernelExact(RunningCost):
    """Exact kernel sums against the flow, linearly interpolated in time."""

    kernel: GaussianKernel
    flow: MeasureFlow

    @property
    def dim(self):
        return self.kernel.dim

    def evaluate(self, times, X):
        times = np.asarray(times, dtype=float)
        fl = self.flow
        if fl.n_times == 1:
            i = np.zeros(len(times), dtype=int)
            th = np.zeros(len(times))
        else:
            i, th = _time_weights(fl.times, times)
        val = np.zeros(X.shape[0])
        grad = np.zeros_like(X)
        hess = np.zeros((X.shape[0], self.dim, self.dim))
        for k in range(X.shape[0]):
            xk = X[k:k + 1]
            for idx, wt in ((i[k], 1.0 - th[k]), (min(i[k] + 1, fl.n_times - 1), th[k])):
                if wt == 0.0:
                    continue
                atoms = fl.points[idx]
                val[k] += wt * self.kernel.value(xk, atoms, fl.weights)[0]
                grad[k] += wt * self.kernel.grad(xk, atoms, fl.weights)[0]
                hess[k] += wt * self.kernel.hess(xk, atoms, fl.weights)[0]
        return val, grad, hess


@dataclass(frozen=True)
class KernelGrid1D(RunningCost):
    """Kernel coupling tabulated on a fine 1D grid per flow time.

    Space is handled by natural cubic splines of each time slice, time by
    linear interpolation.  The table is linear in the measure, so mixtures
    update it in place of recomputing kernel sums.
    """

    kernel: GaussianKernel
    flow_times: np.ndarray
    xs: np.ndarray
    table: np.ndarray
    coef: np.ndarray = field(repr=False, default=None)

    dim = 1

    @staticmethod
    def tabulate(kernel: GaussianKernel, flow: MeasureFlow, xs):
        """F(xs, m(t_i)) for every flow time, shape (n_times, len(xs))."""
        out = np.empty((flow.n_times, xs.shape[0]))
        s2 = 2 * kernel.sigma**2
        c = kernel.strength * kernel.norm
        for i in range(flow.n_times):
            d = xs[:, None] - flow.points[i, :, 0][None, :]
            out[i] = c * (np.exp(-d * d / s2) @ flow.weights)
        return out

    @classmethod
    def grid_for(cls, dom: Domain, n=801):
        a, b = dom.params
        pad = 0.05 * (b - a)
        return np.linspace(a - pad, b + pad, n)

    @classmethod
    def build(cls, kernel, flow, dom, n=801):
        xs = cls.grid_for(dom, n)
        return cls.from_table(kernel, flow.times, xs, cls.tabulate(kernel, flow, xs))

    @classmethod
    def from_table(cls, kernel, flow_times, xs, table):
        sp = CubicSpline(xs, table.T, axis=0)
        # sp.c has shape (4, len(xs)-1, n_times)
        return cls(kernel, np.asarray(flow_times, dtype=float), xs, table, np.ascontiguousarray(sp.c))

    def mixed(self, other_table, alpha):
        return KernelGrid1D.from_table(self.kernel, self.flow_times, self.xs,
                                       (1.0 - alpha) * self.table + alpha * other_table)

    def evaluate(self, times, X):
        x = X[:, 0]
        xs = self.xs
        j = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.shape[0] - 2)
        dx = x - xs[j]
        if self.flow_times.shape[0] == 1:
            i = np.zeros(x.shape[0], dtype=int)
            th = np.zeros(x.shape[0])
            i2 = i
        else:
            i, th = _time_weights(self.flow_times, np.asarray(times, dtype=float))
            i2 = i + 1
        c = self.coef
        c1 = (1.0 - th) * c[:, j, i] + th * c[:, j, i2]  # (4, m)
        val = ((c1[0] * dx + c1[1]) * dx + c1[2]) * dx + c1[3]
        d1 = (3 * c1[0] * dx + 2 * c1[1]) * dx + c1[2]
        d2 = 6 * c1[0] * dx + 2 * c1[1]
        return val, d1[:, None], d2[:, None, None]


@dataclass(frozen=True)
class SumRunning(RunningCost):
    parts: tuple

    @property
    def dim(self):
        return self.parts[0].dim

    def evaluate(self, times, X):
        outs = [p.evaluate(times, X) for p in self.parts]
        return tuple(sum(o[k] for o in outs) for k in range(3))


@dataclass(frozen=True)
class Model:
    """Everything the control problem needs apart from the domain and the flow."""

    lagrangian: LagrangianSpec
    coupling: Coupling

    @property
    def dim(self):
        return self.lagrangian.dim

    @property
    def hamiltonian(self) -> Hamiltonian:
        return Hamiltonian(self.lagrangian)

    @classmethod
    def from_config(cls, spec: dict, dim: int):
        lag = LagrangianSpec.from_config(spec.get("lagrangian", {"kind": "quadratic"}), dim)
        cpl = Coupling.from_config(spec.get("coupling", {"form": "zero"}), spec.get("terminal", "zero"), dim)
        return cls(lag, cpl)

    def to_config(self) -> dict:
        return {"lagrangian": self.lagrangian.to_config(), "coupling": self.coupling.to_config(),
                "terminal": self.coupling.terminal.label}


def monotonicity_gap(coupling: Coupling, m1: ParticleMeasure, m2: ParticleMeasure) -> float:
    """int (F(x, m1) - F(x, m2)) d(m1 - m2)(x), nonnegative for a monotone coupling."""
    f1 = lambda m: coupling.F(m.points, m1) - coupling.F(m.points, m2)
    return float(m1.weights @ f1(m1) - m2.weights @ f1(m2))


__all__ = [
    "CustomLagrangian", "softabs_lagrangian", "LagrangianSpec", "Hamiltonian", "legendre",
    "tangential_hamiltonian", "lambda_plus", "GaussianKernel", "Coupling", "RunningCost",
    "ZeroRunning", "FieldRunning", "KernelExact", "KernelGrid1D", "SumRunning", "Model",
    "monotonicity_gap", "parse_spec",
]
