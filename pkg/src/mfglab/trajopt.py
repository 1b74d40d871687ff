"""State-constrained optimal control by direct transcription.

The decision variables are the nodes gamma_1..gamma_N of a path started at
gamma_0 = x on a uniform grid.  The running cost is integrated with the
trapezoid rule on each interval using the interval velocity
v_k = (gamma_{k+1} - gamma_k) / dt.  Minimisation is a projected Newton method:
nodes on the boundary move only along the tangent space, and every trial
step is mapped back onto the closed domain with the metric projection.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from .errors import DimensionUnsupported, Infeasible, MaxIterations
from .geometry import Domain
from .measures import MeasureFlow
from .model import Model, RunningCost
from .trajectory import Trajectory

ACTIVE_TOL = 1e-9
ARMIJO = 1e-4
# grids finer than this are warm-started from a solve on half as many steps
NESTED_MIN_STEPS = 24
COARSE_TOL = 1e-5
# predicted Newton decrease below which the cost cannot resolve further progress
PRED_FLOOR = 1e-13


@dataclass(frozen=True)
class OptimalControlProblem:
    """Minimise int_t^T L(g, g') + F(g, m(s)) ds + G(g(T)) over paths in the closed domain.

    ``running`` is the coupling F frozen along a given flow; ``n_steps`` is the
    default number of grid intervals for a solve.
    """

    dom: Domain
    model: Model
    running: RunningCost
    T: float = 1.0
    n_steps: int = 100

    @classmethod
    def build(cls, dom: Domain, model: Model, flow: MeasureFlow | None = None, T=1.0, n_steps=100):
        return cls(dom, model, model.coupling.frozen(flow, dom), float(T), int(n_steps))

    def with_running(self, running: RunningCost) -> "OptimalControlProblem":
        return OptimalControlProblem(self.dom, self.model, running, self.T, self.n_steps)

    @property
    def dim(self):
        return self.dom.dim

    @property
    def lag(self):
        return self.model.lagrangian

    @property
    def ham(self):
        return self.model.hamiltonian

    def g(self, X):
        return self.model.coupling.G(X)

    def Dg(self, X):
        return self.model.coupling.D_xG(X)

    def D2g(self, X):
        return self.model.coupling.D2_xG(X)


@dataclass(frozen=True)
class DualArc:
    """Discrete adjoint data of a solved transcription.

    ``p`` holds the interval costates p_k = -D_vL averaged over interval k,
    followed by the terminal covector p_N, so it has one row per node.
    ``beta`` holds the boundary multipliers per node (beta_0 = 0 since the
    initial node is fixed) and ``terminal_nu`` equals ``beta[-1]``.
    ``value_gradient`` is the exact gradient of the discrete value in x.
    """

    times: np.ndarray
    p: np.ndarray
    beta: np.ndarray
    terminal_nu: float
    value_gradient: np.ndarray
    iterations: int = 0
    stationarity: float = 0.0

    @property
    def multiplier_density(self):
        """beta_k / dt, the discrete counterpart of the adjoint multiplier."""
        return self.beta / (self.times[1] - self.times[0])


class _Transcription:
    def __init__(self, prob: OptimalControlProblem, t, x, n_steps):
        self.prob = prob
        self.N = int(n_steps)
        self.t = float(t)
        self.times = np.linspace(t, prob.T, self.N + 1)
        self.dt = (prob.T - t) / self.N
        self.x = np.asarray(x, dtype=float).reshape(prob.dim)
        w = np.ones(self.N + 1)
        w[0] = w[-1] = 0.5
        self.wF = w * self.dt

    def _intervals(self, Y):
        V = np.diff(Y, axis=0) / self.dt
        return Y[:-1], Y[1:], V

    def cost(self, Y):
        lag = self.prob.lag
        A, B, V = self._intervals(Y)
        run = 0.5 * self.dt * (lag.L(A, V) + lag.L(B, V)).sum()
        F = self.prob.running.value(self.times, Y)
        return float(run + self.wF @ F + self.prob.g(Y[-1:])[0])

    def gradient(self, Y):
        """Full gradient (N+1, n) including the fixed node, and interval costates."""
        lag = self.prob.lag
        A, B, V = self._intervals(Y)
        h = 0.5 * self.dt
        p = -0.5 * (lag.D_v(A, V) + lag.D_v(B, V))
        G = np.zeros_like(Y)
        G[:-1] += h * lag.D_x(A, V) + p
        G[1:] += h * lag.D_x(B, V) - p
        _, dF, _ = self.prob.running.evaluate(self.times, Y)
        G += self.wF[:, None] * dF
        G[-1] += self.prob.Dg(Y[-1:])[0]
        return G, p

    def hessian_blocks(self, Y):
        """Diagonal blocks (N+1, n, n) and super-diagonal blocks (N, n, n) of the cost Hessian."""
        lag = self.prob.lag
        A, B, V = self._intervals(Y)
        dt, h = self.dt, 0.5 * self.dt
        n = Y.shape[1]
        D = np.zeros((self.N + 1, n, n))
        xxA, xvA, vvA = lag.D_xx(A, V), lag.D_xv(A, V), lag.D_vv(A, V)
        xxB, xvB, vvB = lag.D_xx(B, V), lag.D_xv(B, V), lag.D_vv(B, V)
        tA = np.transpose(xvA, (0, 2, 1))
        tB = np.transpose(xvB, (0, 2, 1))
        D[:-1] += h * (xxA - (xvA + tA) / dt + vvA / dt**2) + h * vvB / dt**2
        D[1:] += h * vvA / dt**2 + h * (xxB + (xvB + tB) / dt + vvB / dt**2)
        O = h * (xvA / dt - vvA / dt**2) + h * (-tB / dt - vvB / dt**2)
        _, _, d2F = self.prob.running.evaluate(self.times, Y)
        D += self.wF[:, None, None] * d2F
        D[-1] += self.prob.D2g(Y[-1:])[0]
        return D, O

    def warm_start(self):
        prob = self.prob
        X = self.x[None, :]
        v = -prob.ham.D_p(X, prob.Dg(X))[0]
        end = prob.dom.nearest(self.x + (prob.T - self.t) * v)[0]
        s = np.linspace(0.0, 1.0, self.N + 1)[:, None]
        return prob.dom.nearest((1 - s) * self.x + s * end)

    def starts(self):
        """Initial guesses for the coarse multi-start: the terminal-gradient line,
        rest at x, and runs to the boundary along each coordinate axis arriving
        at mid-horizon.  Duplicates are dropped."""
        dom = self.prob.dom
        n = dom.dim
        cands = [self.warm_start(), np.repeat(self.x[None, :], self.N + 1, axis=0)]
        s = np.minimum(2.0 * np.linspace(0.0, 1.0, self.N + 1), 1.0)[:, None]
        reach = 2.0 * dom.diameter
        for i in range(n):
            for sign in (1.0, -1.0):
                d = np.zeros(n)
                d[i] = sign
                end = dom.nearest(self.x + reach * d)[0]
                cands.append(dom.nearest((1 - s) * self.x + s * end))
        out = []
        for c in cands:
            if all(np.max(np.abs(c - o)) > 1e-9 for o in out):
                out.append(c)
        return out


def _banded_upper(Dr, Or, mask, n):
    """Pack reduced block-tridiagonal data into LAPACK upper banded storage."""
    idx = np.cumsum(mask.ravel()).reshape(mask.shape) - 1
    nvar = int(mask.sum())
    u = 2 * n - 1
    ab = np.zeros((u + 1, nvar))
    K = mask.shape[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    # diagonal blocks
    valid = mask[:, :, None] & mask[:, None, :] & (ii <= jj)[None]
    k, i, j = np.nonzero(valid)
    r, c = idx[k, i], idx[k, j]
    ab[u + r - c, c] = Dr[k, i, j]
    # coupling blocks between consecutive nodes
    if K > 1:
        valid = mask[:-1, :, None] & mask[1:, None, :]
        k, i, j = np.nonzero(valid)
        r, c = idx[k, i], idx[k + 1, j]
        ab[u + r - c, c] = Or[k, i, j]
    return ab, idx, nvar


def _solve_banded_spd(ab, rhs):
    diag = np.abs(ab[-1]).max() if ab.shape[1] else 1.0
    tau = 0.0
    for _ in range(60):
        try:
            mat = ab.copy()
            mat[-1] += tau
            c = cholesky_banded(mat, lower=False)
            return cho_solve_banded((c, False), rhs)
        except LinAlgError:
            tau = max(2.0 * tau, 1e-10 * max(diag, 1e-300))
    return -rhs  # steepest descent fallback


def solve_trajectory(prob: OptimalControlProblem, t, x, n_steps=None, warm=None,
                     tol=1e-8, max_iter=300, raise_on_fail=True):
    """Minimise the transcribed cost from (t, x).

    Returns ``(Trajectory, DualArc, value)``.  ``warm`` may be an array of
    node positions on the same grid used as the initial guess.
    """
    dom = prob.dom
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != dom.dim:
        raise ValueError(f"initial point must have dimension {dom.dim}")
    if dom.b(x)[0] > 1e-9:
        raise Infeasible(f"initial point is outside the closed domain (b={dom.b(x)[0]:.3e})")
    x = dom.nearest(x)[0]
    N = int(n_steps or prob.n_steps)
    if N < 1:
        raise ValueError("the time grid needs at least 2 nodes")
    if not t < prob.T:
        raise ValueError("t must be before the horizon T")
    tr = _Transcription(prob, t, x, N)
    n = dom.dim
    if warm is not None:
        Y = np.array(warm, dtype=float).reshape(N + 1, n)
        Y[0] = x
        Y = dom.nearest(Y)
    elif N > NESTED_MIN_STEPS:
        # the active set moves one node per iteration, so start from a coarse solve
        coarse, _, _ = solve_trajectory(prob, t, x, n_steps=(N + 1) // 2, tol=max(tol, COARSE_TOL),
                                        max_iter=max_iter, raise_on_fail=False)
        Y = np.column_stack([np.interp(tr.times, coarse.times, coarse.nodes[:, i]) for i in range(n)])
        Y = dom.nearest(Y)
    else:
        # small grid: keep the best of several local solves to avoid poor basins
        best = None
        for Y0 in tr.starts():
            cand = solve_trajectory(prob, t, x, n_steps=N, warm=Y0, tol=max(tol, COARSE_TOL),
                                    max_iter=max_iter, raise_on_fail=False)
            if best is None or cand[2] < best[2] - 1e-12:
                best = cand
        Y = best[0].nodes.copy()
    Y[0] = x
    J = tr.cost(Y)
    dt = tr.dt
    it = 0
    res = np.inf
    beta = np.zeros(N + 1)
    for it in range(1, max_iter + 1):
        G, p = tr.gradient(Y)
        Yf = Y[1:]
        bY = dom.b(Yf)
        active = bY >= -ACTIVE_TOL
        nu = dom.normal(Yf)
        beta[:] = 0.0
        beta[1:][active] = -np.sum(G[1:][active] * nu[active], axis=1)
        release = active & (beta[1:] / dt < -tol)
        fixed = active & ~release
        # tangent-space reduction
        Z = np.broadcast_to(np.eye(n), (N, n, n)).copy()
        mask = np.ones((N, n), dtype=bool)
        if np.any(fixed):
            Tb = dom.tangent_basis(Yf[fixed])
            Zf = np.zeros((Tb.shape[0], n, n))
            Zf[:, :, : n - 1] = Tb
            Z[fixed] = Zf
            mask[fixed, n - 1:] = False
        g_red = np.einsum("kji,kj->ki", Z, G[1:])
        res = np.abs(g_red[mask]).max() / dt if mask.any() else 0.0
        if res <= tol:
            break
        D, O = tr.hessian_blocks(Y)
        if np.any(fixed):
            Hb = dom.hess_b(Yf[fixed])
            D[1:][fixed] += beta[1:][fixed][:, None, None] * Hb
        Dr = np.einsum("kai,kab,kbj->kij", Z, D[1:], Z)
        Or = np.einsum("kai,kab,kbj->kij", Z[:-1], O[1:], Z[1:])
        ab, idx, _ = _banded_upper(Dr, Or, mask, n)
        rhs = -g_red[mask]
        d_red = _solve_banded_spd(ab, rhs)
        if rhs @ d_red <= 0:
            d_red = rhs
        pred = 0.5 * (rhs @ d_red)
        if pred <= PRED_FLOOR * (1.0 + abs(J)) and res <= 1e6 * tol:
            # rounding floor: the model decrease is below what the cost can resolve
            break
        # Newton direction first; a diagonally scaled gradient step if its line search fails
        diag = np.maximum(ab[-1], 1e-300)
        for d in (d_red, rhs / diag):
            dpad = np.zeros((N, n))
            dpad[mask] = d
            step = np.einsum("kij,kj->ki", Z, dpad)
            s = 1.0
            accepted = False
            for _ in range(60):
                Yn = Y.copy()
                Yn[1:] = dom.nearest(Yf + s * step)
                Jn = tr.cost(Yn)
                if Jn <= J + ARMIJO * np.sum(G[1:] * (Yn[1:] - Yf)):
                    accepted = True
                    break
                s *= 0.5
            if accepted:
                break
        if not accepted:
            # no decrease possible at working precision
            if res <= 1e3 * tol:
                break
            if raise_on_fail:
                raise MaxIterations(f"line search failed with stationarity {res:.3e}")
            break
        stalled = Jn >= J - 1e-15 * (1.0 + abs(J))
        Y, J = Yn, Jn
        if stalled and res <= 1e3 * tol:
            # rounding floor: no measurable decrease is left
            break
    else:
        if raise_on_fail:
            raise MaxIterations(f"no convergence in {max_iter} iterations (stationarity {res:.3e})")
    G, p = tr.gradient(Y)
    bY = dom.b(Y)
    active = bY >= -ACTIVE_TOL
    nu = dom.normal(Y)
    beta = np.where(active, -np.sum(G * nu, axis=1), 0.0)
    beta[0] = 0.0
    beta = np.maximum(beta, 0.0)
    p_N = prob.Dg(Y[-1:])[0] + beta[-1] * nu[-1]
    P = np.vstack([p, p_N[None, :]])
    traj = Trajectory(float(t), float(prob.T), Y)
    dual = DualArc(tr.times, P, beta, float(beta[-1]), G[0].copy(), it, float(res))
    return traj, dual, J


def trajectory_cost(prob: OptimalControlProblem, traj: Trajectory) -> float:
    """Transcribed cost of an arbitrary path on the problem's time grid."""
    tr = _Transcription(prob, traj.t0, traj.nodes[0], traj.n_steps)
    return tr.cost(traj.nodes)


# -- checks --------------------------------------------------------------------

def lstar_bound(prob: OptimalControlProblem, n_samples=400) -> float:
    """Loose velocity ceiling max{1, 2 mu sup|D_pH(x, Dg(x))|} * exp(c T), c = mu (M + kappa)."""
    X = sample_domain(prob.dom, n_samples)
    lag = prob.lag
    mu = lag.mu
    M = lag.growth_constant(X)
    kappa = prob.model.coupling.kappa
    vel = np.linalg.norm(prob.ham.D_p(X, prob.Dg(X)), axis=1).max()
    return float(max(1.0, 2.0 * mu * vel) * np.exp(mu * (M + kappa) * prob.T))


def sample_domain(dom: Domain, n=400) -> np.ndarray:
    """Deterministic sample of the closed domain (grid points plus the boundary)."""
    if dom.dim == 1:
        a, b = dom.params
        return np.linspace(a, b, n)[:, None]
    lo, hi = dom.bounding_box()
    k = int(np.sqrt(n)) + 1
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], k), np.linspace(lo[1], hi[1], k))
    P = np.column_stack([gx.ravel(), gy.ravel()])
    P = P[dom.b(P) <= 0]
    th = np.linspace(0, 2 * np.pi, k * 4, endpoint=False)
    ring = dom.nearest(np.asarray(dom.center) + 10 * max(dom.params) * np.column_stack([np.cos(th), np.sin(th)]))
    return np.vstack([P, ring])


def necessary_condition_residuals(prob: OptimalControlProblem, traj: Trajectory, dual: DualArc) -> dict:
    """Residuals of the discrete adjoint system, the feedback law and the terminal condition."""
    dom, lag, ham = prob.dom, prob.lag, prob.ham
    Y = traj.nodes
    N = traj.n_steps
    dt = traj.step
    times = traj.times
    A, B, V = Y[:-1], Y[1:], traj.velocities
    p = dual.p[:-1]
    _, dF, _ = prob.running.evaluate(times, Y)
    # node forces for interior nodes k = 1..N-1
    dxf = 0.5 * (lag.D_x(A[1:], V[1:]) + lag.D_x(B[:-1], V[:-1])) + dF[1:-1]
    nu = dom.normal(Y)
    beta = dual.beta
    adj = (p[1:] - p[:-1]) / dt + dxf + (beta[1:-1] / dt)[:, None] * nu[1:-1]
    adjoint = float(np.abs(adj).max()) if adj.size else 0.0
    mid = 0.5 * (A + B)
    feedback = float(np.linalg.norm(V + ham.D_p(mid, p), axis=1).max())
    # terminal: p_N from the last adjoint step, compared with Dg + nu Db
    dxf_N = 0.5 * lag.D_x(B[-1:], V[-1:])[0] + 0.5 * dF[-1]
    pN = p[-1] - dt * dxf_N
    on_bd = abs(dom.b(Y[-1])[0]) <= ACTIVE_TOL
    excess = pN - prob.Dg(Y[-1:])[0]
    nuT = max(0.0, float(excess @ nu[-1])) if on_bd else 0.0
    terminal = float(np.linalg.norm(excess - nuT * nu[-1]))
    bvals = dom.b(Y)
    lstar = lstar_bound(prob)
    speed = float(np.linalg.norm(V, axis=1).max())
    return {
        "adjoint": adjoint,
        "feedback": feedback,
        "terminal": terminal,
        "terminal_nu": nuT,
        "velocity_margin": lstar - speed,
        "lstar": lstar,
        "max_speed": speed,
        "min_multiplier": float(beta.min()),
        "complementarity": float(np.max(beta * np.abs(bvals))),
        "n_active": int(np.sum(beta > 0)),
    }


def dp_oracle_value(prob: OptimalControlProblem, t, x, dx=1e-2, dt=None, dv=None, vmax=None) -> float:
    """Semi-Lagrangian dynamic programming estimate of the value (1D only).

    The state grid has spacing ``dx``; velocities are searched on a grid of
    spacing ``dv`` (default 2 dx) up to ``vmax``, landing points must stay in
    the closed interval, and the value between nodes uses monotone cubic
    interpolation.  Linear interpolation loses a log factor near the wall,
    where the curvature of u grows like 1/(T - t).
    """
    dom = prob.dom
    if dom.dim != 1:
        raise DimensionUnsupported("the dynamic programming oracle is one-dimensional")
    dt = dt or dx
    a, b = dom.params
    nx = int(round((b - a) / dx)) + 1
    xs = np.linspace(a, b, nx)
    nt = max(1, int(round((prob.T - t) / dt)))
    dt = (prob.T - t) / nt
    times = np.linspace(t, prob.T, nt + 1)
    if vmax is None:
        vmax = min(lstar_bound(prob), (b - a) / dt)
    dv = dv or 2.0 * (xs[1] - xs[0])
    nv = int(np.ceil(vmax / dv))
    vs = dv * np.arange(-nv, nv + 1)
    lag = prob.lag
    U = prob.g(xs[:, None])
    Xg, Vg = np.meshgrid(xs, vs, indexing="ij")
    Land = Xg + Vg * dt
    ok = (Land >= a - 1e-12) & (Land <= b + 1e-12)
    Land = np.clip(Land, a, b)
    Lx = lag.L(Xg.reshape(-1, 1), Vg.reshape(-1, 1)).reshape(Xg.shape)
    Ly = lag.L(Land.reshape(-1, 1), Vg.reshape(-1, 1)).reshape(Xg.shape)
    for k in range(nt - 1, -1, -1):
        F0 = prob.running.value(np.full(nx, times[k]), xs[:, None])
        F1 = prob.running.value(np.full(Land.size, times[k + 1]), Land.reshape(-1, 1)).reshape(Land.shape)
        stage = 0.5 * dt * (Lx + Ly) + 0.5 * dt * (F0[:, None] + F1)
        total = stage + PchipInterpolator(xs, U)(Land)
        U = np.where(ok, total, np.inf).min(axis=1)
    return float(np.interp(float(np.asarray(x).reshape(-1)[0]), xs, U))


# -- export --------------------------------------------------------------------

def fmt(v) -> str:
    """Deterministic float formatting used in every CSV."""
    return f"{float(v):.12e}"


def trajectory_rows(prob: OptimalControlProblem, traj: Trajectory, dual: DualArc | None = None):
    V = traj.velocities
    speed = np.append(np.linalg.norm(V, axis=1), np.linalg.norm(V[-1]))
    bvals = prob.dom.b(traj.nodes)
    beta = dual.beta if dual is not None else np.zeros(traj.n_steps + 1)
    for k, s in enumerate(traj.times):
        yield [fmt(s), *(fmt(c) for c in traj.nodes[k]), fmt(speed[k]), fmt(bvals[k]), fmt(beta[k])]


def trajectory_csv(prob: OptimalControlProblem, traj: Trajectory, dual: DualArc | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", *[f"x{i}" for i in range(traj.dim)], "speed", "b", "multiplier"])
    w.writerows(trajectory_rows(prob, traj, dual))
    return buf.getvalue()
