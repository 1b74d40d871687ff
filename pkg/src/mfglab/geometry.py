"""Analytic C^2 domains: signed distance, normals, curvature and projections.

Three bounded convex kinds are supported: an interval (a, b), a disk and an
axis-aligned ellipse.  All evaluators are vectorised over point arrays of
shape (m, dim); the module-level functions take single points.

The signed distance ``b`` is negative inside, zero on the boundary and
positive outside.  Inside, ``b`` is C^2 only at depth less than ``rho0``;
outside a convex set it is smooth everywhere, so the outer side of the tube
is bounded by the domain diameter only to reject absurd inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotTangent, OutsideTube, PerturbationTooLarge
from .trajectory import Trajectory

# fraction of the analytic C^2 bound used for rho0
RHO0_SAFETY = 0.9
_ELLIPSE_MAX_ITER = 50
_ELLIPSE_TOL = 1e-12


def _as_points(x, dim):
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, dim) if pts.size == dim else pts.reshape(-1, dim)
    if pts.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Domain:
    """A bounded open set with C^2 boundary.

    Build instances with :meth:`interval`, :meth:`disk` or :meth:`ellipse`.
    ``params`` holds (a, b) for intervals, (radius,) for disks and the two
    semi-axes for ellipses.
    """

    kind: str
    center: tuple
    params: tuple
    rho0: float = field(init=False)

    def __post_init__(self):
        if self.kind == "interval":
            a, b = self.params
            if not a < b:
                raise ValueError("interval needs a < b")
            bound = (b - a) / 2.0
        elif self.kind == "disk":
            (radius,) = self.params
            if not radius > 0:
                raise ValueError("disk radius must be positive")
            bound = radius
        elif self.kind == "ellipse":
            ax, ay = self.params
            if not (ax > 0 and ay > 0):
                raise ValueError("ellipse semi-axes must be positive")
            bound = min(ax, ay) ** 2 / max(ax, ay)
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        object.__setattr__(self, "rho0", RHO0_SAFETY * bound)

    # -- constructors -----------------------------------------------------
    @classmethod
    def interval(cls, a, b):
        return cls("interval", (0.5 * (a + b),), (float(a), float(b)))

    @classmethod
    def disk(cls, center=(0.0, 0.0), radius=1.0):
        return cls("disk", tuple(float(c) for c in center), (float(radius),))

    @classmethod
    def ellipse(cls, center=(0.0, 0.0), semi_axes=(2.0, 1.0)):
        return cls("ellipse", tuple(float(c) for c in center), tuple(float(s) for s in semi_axes))

    @classmethod
    def from_config(cls, spec: dict) -> "Domain":
        kind = spec["kind"]
        if kind == "interval":
            return cls.interval(*spec["bounds"])
        if kind == "disk":
            return cls.disk(spec.get("center", [0.0, 0.0]), spec["radius"])
        if kind == "ellipse":
            return cls.ellipse(spec.get("center", [0.0, 0.0]), spec["semi_axes"])
        raise ValueError(f"unknown domain kind {kind!r}")

    def to_config(self) -> dict:
        if self.kind == "interval":
            return {"kind": "interval", "bounds": list(self.params)}
        if self.kind == "disk":
            return {"kind": "disk", "center": list(self.center), "radius": self.params[0]}
        return {"kind": "ellipse", "center": list(self.center), "semi_axes": list(self.params)}

    # -- basic data -------------------------------------------------------
    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    @property
    def diameter(self) -> float:
        if self.kind == "interval":
            return self.params[1] - self.params[0]
        return 2.0 * max(self.params)

    @property
    def outer_width(self) -> float:
        return self.diameter

    def bounding_box(self):
        c = np.asarray(self.center)
        if self.kind == "interval":
            return np.array([self.params[0]]), np.array([self.params[1]])
        half = np.array(self.params if self.kind == "ellipse" else self.params * 2)
        return c - half, c + half

    # -- vectorised evaluators --------------------------------------------
    def _ellipse_nearest(self, pts):
        """Nearest boundary point for each row of ``pts`` (relative to the centre).

        Works in the first quadrant by symmetry and solves the stationarity
        condition written in its Lagrange-multiplier form, where the root is
        unique and the residual is monotone, with safeguarded Newton steps.
        """
        ax, ay = self.params
        swap = ay > ax
        p = pts[:, ::-1] if swap else pts
        e0, e1 = (ay, ax) if swap else (ax, ay)
        sgn = np.where(p < 0, -1.0, 1.0)
        y0, y1 = np.abs(p[:, 0]), np.abs(p[:, 1])
        q = np.empty_like(p)
        on_axis1 = y1 <= 0.0
        gen = ~on_axis1 & (y0 > 0.0)
        on_axis0 = ~on_axis1 & ~gen
        # y1 == 0: nearest point on the major axis side
        if np.any(on_axis1):
            z = y0[on_axis1]
            lim = (e0 * e0 - e1 * e1) / e0
            inner = z < lim
            x0 = np.where(inner, e0 * e0 * z / max(e0 * e0 - e1 * e1, 1e-300), e0)
            x1 = np.where(inner, e1 * np.sqrt(np.clip(1.0 - (x0 / e0) ** 2, 0.0, None)), 0.0)
            q[on_axis1, 0], q[on_axis1, 1] = x0, x1
        if np.any(on_axis0):
            q[on_axis0, 0] = 0.0
            q[on_axis0, 1] = e1
        if np.any(gen):
            z0 = y0[gen] / e0
            z1 = y1[gen] / e1
            g = z0 * z0 + z1 * z1 - 1.0
            r0 = (e0 / e1) ** 2
            lo = z1 - 1.0
            hi = np.where(g < 0, 0.0, np.sqrt((r0 * z0) ** 2 + z1 * z1) - 1.0)
            s = 0.5 * (lo + hi)
            for _ in range(_ELLIPSE_MAX_ITER):
                a0 = r0 * z0 / (s + r0)
                a1 = z1 / (s + 1.0)
                f = a0 * a0 + a1 * a1 - 1.0
                lo = np.where(f > 0, s, lo)
                hi = np.where(f > 0, hi, s)
                df = -2.0 * (a0 * a0 / (s + r0) + a1 * a1 / (s + 1.0))
                # df vanishes only for subnormal inputs; bisection takes over there
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    newton = s - f / df
                ok = (newton > lo) & (newton < hi)
                s_new = np.where(ok, newton, 0.5 * (lo + hi))
                if np.all(np.abs(s_new - s) <= _ELLIPSE_TOL * (1.0 + np.abs(s))):
                    s = s_new
                    break
                s = s_new
            q[gen, 0] = r0 * y0[gen] / (s + r0)
            q[gen, 1] = y1[gen] / (s + 1.0)
        q = q * sgn
        return q[:, ::-1] if swap else q

    def boundary_point(self, x):
        """Nearest point of the boundary (the foot of the normal)."""
        pts = _as_points(x, self.dim)
        if self.kind == "interval":
            a, b = self.params
            return np.where(pts < 0.5 * (a + b), a, b)
        c = np.asarray(self.center)
        rel = pts - c
        if self.kind == "disk":
            r = np.linalg.norm(rel, axis=1, keepdims=True)
            safe = np.where(r > 0, r, 1.0)
            unit = np.where(r > 0, rel / safe, np.array([1.0, 0.0]))
            return c + self.params[0] * unit
        return c + self._ellipse_nearest(rel)

    def b(self, x) -> np.ndarray:
        """Signed distance, shape (m,)."""
        pts = _as_points(x, self.dim)
        if self.kind == "interval":
            a, bb = self.params
            return np.maximum(a - pts[:, 0], pts[:, 0] - bb)
        if self.kind == "disk":
            return np.linalg.norm(pts - np.asarray(self.center), axis=1) - self.params[0]
        foot = self.boundary_point(pts)
        dist = np.linalg.norm(pts - foot, axis=1)
        rel = pts - np.asarray(self.center)
        inside = (rel[:, 0] / self.params[0]) ** 2 + (rel[:, 1] / self.params[1]) ** 2 < 1.0
        return np.where(inside, -dist, dist)

    def normal(self, x) -> np.ndarray:
        """Outward unit normal at the foot point; equals Db inside the tube."""
        pts = _as_points(x, self.dim)
        if self.kind == "interval":
            a, bb = self.params
            return np.where(pts < 0.5 * (a + bb), -1.0, 1.0)
        c = np.asarray(self.center)
        if self.kind == "disk":
            rel = pts - c
            r = np.linalg.norm(rel, axis=1, keepdims=True)
            return np.where(r > 0, rel / np.where(r > 0, r, 1.0), np.array([1.0, 0.0]))
        foot = self.boundary_point(pts) - c
        n = foot / np.asarray(self.params) ** 2
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def curvature(self, x) -> np.ndarray:
        """Curvature of the boundary at the foot point (0 for intervals)."""
        pts = _as_points(x, self.dim)
        if self.kind == "interval":
            return np.zeros(pts.shape[0])
        if self.kind == "disk":
            return np.full(pts.shape[0], 1.0 / self.params[0])
        ax, ay = self.params
        foot = self.boundary_point(pts) - np.asarray(self.center)
        s = foot[:, 1] / ay
        co = foot[:, 0] / ax
        return ax * ay / (ax * ax * s * s + ay * ay * co * co) ** 1.5

    def hess_b(self, x) -> np.ndarray:
        """Hessian of the signed distance, shape (m, dim, dim)."""
        pts = _as_points(x, self.dim)
        if self.kind == "interval":
            return np.zeros((pts.shape[0], 1, 1))
        nu = self.normal(pts)
        tau = np.stack([-nu[:, 1], nu[:, 0]], axis=1)
        kappa = self.curvature(pts)
        if self.kind == "disk":
            r = np.linalg.norm(pts - np.asarray(self.center), axis=1)
            coef = 1.0 / r
        else:
            coef = kappa / (1.0 + kappa * self.b(pts))
        return coef[:, None, None] * tau[:, :, None] * tau[:, None, :]

    def nearest(self, x) -> np.ndarray:
        """Metric projection onto the closure; identity on points of the closure."""
        pts = _as_points(x, self.dim)
        outside = self.b(pts) > 0.0
        if not np.any(outside):
            return pts.copy()
        out = pts.copy()
        out[outside] = self.boundary_point(pts[outside])
        return out

    def tangent_basis(self, x) -> np.ndarray:
        """Orthonormal basis of the tangent space at the foot point, shape (m, dim, dim-1)."""
        pts = _as_points(x, self.dim)
        if self.dim == 1:
            return np.zeros((pts.shape[0], 1, 0))
        nu = self.normal(pts)
        return np.stack([-nu[:, 1], nu[:, 0]], axis=1)[:, :, None]

    def contains(self, x, tol=1e-9) -> np.ndarray:
        return self.b(x) <= tol

    def check_tube(self, x):
        bx = self.b(x)
        if np.any(bx <= -self.rho0) or np.any(bx >= self.outer_width):
            raise OutsideTube(f"|b| outside the C^2 tube (rho0={self.rho0:g}) at b={bx}")
        return bx


# -- single-point operations ------------------------------------------------

def signed_distance(dom: Domain, x) -> float:
    return float(dom.b(x)[0])


def grad_b(dom: Domain, x) -> np.ndarray:
    dom.check_tube(x)
    g = dom.normal(x)[0]
    return g


def hess_b(dom: Domain, x) -> np.ndarray:
    dom.check_tube(x)
    return dom.hess_b(x)[0]


def outward_normal(dom: Domain, x) -> np.ndarray:
    return dom.normal(x)[0]


def project(dom: Domain, x) -> np.ndarray:
    """Nearest point of the closed domain.

    Raises OutsideTube for points further than ``dom.outer_width`` outside.
    """
    bx = dom.b(x)
    if np.any(bx >= dom.outer_width):
        raise OutsideTube(f"point at distance {bx[0]:g} is outside the projection tube")
    return dom.nearest(x)[0]


def perturbed_projected_path(dom: Domain, traj: Trajectory, h, r: float) -> Trajectory:
    """Shift ``traj`` by a perturbation that fades out linearly over time ``r``, then project.

    Node ``s`` is moved by ``max(0, 1 - (s - t0)/r) * h`` and mapped back onto
    the closed domain with the metric projection.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    hn = float(np.linalg.norm(h))
    if r <= 0:
        raise PerturbationTooLarge("fade-out time r must be positive")
    if hn > min(dom.rho0, r) + 1e-15:
        raise PerturbationTooLarge(f"|h|={hn:g} exceeds min(rho0, r)={min(dom.rho0, r):g}")
    weights = np.clip(1.0 + (traj.t0 - traj.times) / r, 0.0, None)
    shifted = traj.nodes + weights[:, None] * h[None, :]
    return Trajectory(traj.t0, traj.T, dom.nearest(shifted))


def tangential_line_path(dom: Domain, t: float, x, v, R: float, n_steps: int = 64) -> Trajectory:
    """Projected straight line ``s -> proj(x + (s - t) v)`` on [t, t + R]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    nu = dom.normal(x)[0]
    if abs(dom.b(x)[0]) > 1e-9:
        raise NotTangent("base point is not on the boundary")
    if abs(float(nu @ v)) > 1e-10:
        raise NotTangent(f"<v, nu> = {float(nu @ v):.3e} is not zero")
    if not R < dom.rho0 / (1.0 + np.linalg.norm(v)):
        raise NotTangent(f"R={R:g} must be below rho0/(1+|v|)")
    s = np.linspace(0.0, R, n_steps + 1)
    line = x[None, :] + s[:, None] * v[None, :]
    return Trajectory(t, t + R, dom.nearest(line))


def perturbation_bounds(dom: Domain, traj: Trajectory, h, r: float):
    """Return (sup deviation, integral of squared velocity deviation) for the projected perturbation."""
    hat = perturbed_projected_path(dom, traj, h, r)
    sup = traj.sup_distance(hat)
    dv = hat.velocities - traj.velocities
    energy = float(np.sum(dv * dv) * traj.step)
    return sup, energy
