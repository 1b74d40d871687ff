"""Constrained MFG equilibria by fictitious play over path measures.

Each iteration computes a best response (one optimal path per particle of
m0 against the current flow) and averages it into the running path measure
with harmonic weights.  The returned equilibrium is the last best response:
every path in it is optimal against the flow it was computed for, and that
coupling flow is within the final residual of the equilibrium flow in d1.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NotConverged
from .geometry import Domain
from .measures import (MeasureFlow, ParticleMeasure, PathMeasure, flow_distances, mix,
                       systematic_resample)
from .model import KernelGrid1D, KernelExact, Model, ZeroRunning
from .trajopt import OptimalControlProblem, fmt, solve_trajectory, trajectory_cost
from .valuefn import ValueSampler, default_threads

MAX_PATHS = 10_000


# -- initial measures ------------------------------------------------------------

def ingest_m0(spec: dict, dom: Domain, seed: int = 0) -> ParticleMeasure:
    """Build m0 from a config entry.

    Kinds: ``particles`` (explicit ``points`` and optional ``weights``),
    ``grid`` (``n`` equal-weight cell midpoints of ``support``, or of the
    domain's bounding box clipped to the domain in 2D) and ``sample``
    (``n`` seeded draws of the ``density`` ``uniform`` or ``gaussian``).
    """
    kind = spec["kind"]
    n = int(spec.get("n", 0))
    if kind == "particles":
        pts = np.asarray(spec["points"], dtype=float).reshape(-1, dom.dim)
        m0 = ParticleMeasure(pts, spec.get("weights"))
    elif kind == "grid":
        if dom.dim == 1:
            lo, hi = spec.get("support", list(dom.params))
            edges = np.linspace(lo, hi, n + 1)
            m0 = ParticleMeasure(0.5 * (edges[1:] + edges[:-1]))
        else:
            lo, hi = dom.bounding_box()
            k = int(np.ceil(np.sqrt(n)))
            while True:
                gx = lo[0] + (np.arange(k) + 0.5) * (hi[0] - lo[0]) / k
                gy = lo[1] + (np.arange(k) + 0.5) * (hi[1] - lo[1]) / k
                P = np.array([(a, b) for b in gy for a in gx])
                P = P[dom.b(P) < 0]
                if P.shape[0] >= n:
                    break
                k += 1
            m0 = ParticleMeasure(P[:n])
    elif kind == "sample":
        rng = np.random.default_rng(seed)
        density = spec.get("density", "uniform")
        pts = []
        lo, hi = (np.array([dom.params[0]]), np.array([dom.params[1]])) if dom.dim == 1 else dom.bounding_box()
        if "support" in spec and dom.dim == 1:
            lo, hi = np.array([spec["support"][0]]), np.array([spec["support"][1]])
        while len(pts) < n:
            if density == "uniform":
                cand = rng.uniform(lo, hi, size=(n, dom.dim))
            elif density == "gaussian":
                mean = np.asarray(spec.get("mean", [0.0] * dom.dim), dtype=float)
                cand = mean + float(spec.get("std", 0.3)) * rng.standard_normal((n, dom.dim))
            else:
                raise ValueError(f"unknown density {density!r}")
            cand = cand[(dom.b(cand) < 0) & np.all((cand >= lo) & (cand <= hi), axis=1)]
            pts.extend(cand.tolist())
        m0 = ParticleMeasure(np.array(pts[:n]))
    else:
        raise ValueError(f"unknown m0 kind {kind!r}")
    if np.any(dom.b(m0.points) > 1e-9):
        raise ValueError("m0 has particles outside the closed domain")
    return m0


# -- best response -----------------------------------------------------------------

def best_response(prob: OptimalControlProblem, m0: ParticleMeasure, warm: PathMeasure | None = None,
                  threads: int | None = None, tol=1e-8):
    """One optimal path per particle of m0 for ``prob`` (F already frozen along the flow).

    Returns ``(PathMeasure, costs)``; results are ordered by particle index.
    """
    threads = threads or default_threads()

    def one(j):
        # the coupled problem can be nonconvex: keep the better of a cold
        # multi-start solve and the warm start from the previous response
        traj, _, val = solve_trajectory(prob, 0.0, m0.points[j], tol=tol)
        if warm is not None:
            tw, _, vw = solve_trajectory(prob, 0.0, m0.points[j], warm=warm.paths[j], tol=tol)
            if vw < val - 1e-12:
                traj, val = tw, vw
        return traj.nodes, val

    idx = range(len(m0))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, idx))
    else:
        out = [one(j) for j in idx]
    times = np.linspace(0.0, prob.T, prob.n_steps + 1)
    paths = np.stack([o[0] for o in out])
    return PathMeasure(times, paths, m0.weights), np.array([o[1] for o in out])


# -- fictitious play -----------------------------------------------------------------

@dataclass
class EquilibriumSettings:
    T: float = 1.0
    n_times: int = 101
    tol: float = 1e-2
    max_iter: int = 100
    init: str = "static"
    seed: int = 0
    max_paths: int = MAX_PATHS
    sampler_steps: int = 200
    grid_points: int = 801
    threads: int | None = None
    tol_opt: float = 1e-6


@dataclass
class EquilibriumResult:
    """Output of :func:`solve_equilibrium`.

    ``eta`` is the purified equilibrium (the best response to
    ``coupling_flow``), ``flow`` its time marginals and ``trace`` the
    residuals eps_k.  ``sampler`` evaluates u against ``coupling_flow``.
    """

    dom: Domain
    model: Model
    m0: ParticleMeasure
    eta: PathMeasure
    flow: MeasureFlow
    coupling_flow: MeasureFlow
    trace: list
    converged: bool
    settings: EquilibriumSettings
    costs: np.ndarray
    running: object = field(repr=False, default=None)
    ties: int = 0
    _sampler: ValueSampler | None = field(default=None, repr=False)

    @property
    def iterations(self):
        """Fixed-point updates performed; ``trace`` holds eps_0 .. eps_iterations."""
        return len(self.trace) - 1

    @property
    def residual(self):
        return self.trace[-1] if self.trace else np.inf

    @property
    def problem(self) -> OptimalControlProblem:
        s = self.settings
        return OptimalControlProblem(self.dom, self.model, self.running, s.T, s.n_times - 1)

    @property
    def sampler(self) -> ValueSampler:
        if self._sampler is None:
            self._sampler = ValueSampler(self.problem, n_steps=self.settings.sampler_steps,
                                         threads=self.settings.threads)
        return self._sampler

    def support_gaps(self):
        """Cost of each equilibrium path minus the best-response cost from its start."""
        prob = self.problem
        gaps = []
        for j in range(len(self.eta)):
            cost = trajectory_cost(prob, self.eta.trajectory(j))
            gaps.append(cost - self.costs[j])
        return np.array(gaps)


def _running_for(model: Model, dom: Domain, flow: MeasureFlow, grid_points: int):
    cpl = model.coupling
    if cpl.form == "kernel" and dom.dim == 1:
        return KernelGrid1D.build(cpl.kernel, flow, dom, grid_points)
    return cpl.frozen(flow, dom)


def solve_equilibrium(dom: Domain, model: Model, m0: ParticleMeasure, settings: EquilibriumSettings | None = None,
                      strict: bool = False, log=None) -> EquilibriumResult:
    """Fictitious play eta_{k+1} = (1 - a_k) eta_k + a_k BR(m^{eta_k}) with a_k = 1/(k+1).

    Stops once eps_k = sup_t d1(m^{eta_k}(t), m^{BR_k}(t)) <= tol or after
    ``max_iter`` updates, so the trace holds at most ``max_iter + 1``
    residuals.  With ``strict=True`` a miss raises :class:`NotConverged`
    carrying the result.
    """
    s = settings or EquilibriumSettings()
    N = s.n_times - 1
    times = np.linspace(0.0, s.T, s.n_times)
    rng = np.random.default_rng(s.seed)
    base = OptimalControlProblem(dom, model, ZeroRunning(dom.dim), s.T, N)
    cpl = model.coupling
    if s.init == "static":
        eta = PathMeasure(times, np.repeat(m0.points[:, None, :], s.n_times, axis=1), m0.weights)
    elif s.init == "free":
        free = base if cpl.form != "field" else base.with_running(cpl.frozen(None, dom))
        eta, _ = best_response(free, m0, threads=s.threads)
    else:
        raise ValueError(f"unknown flow initialisation {s.init!r}")
    flow = eta.flow()
    running = _running_for(model, dom, flow, s.grid_points)
    trace = []
    warm = None
    converged = False
    br, costs = eta, np.zeros(len(m0))
    for k in range(s.max_iter + 1):
        br, costs = best_response(base.with_running(running), m0, warm=warm, threads=s.threads)
        eps = float(np.max(flow_distances(flow, br.flow())))
        trace.append(eps)
        if log is not None:
            log(k, eps)
        if eps <= s.tol:
            converged = True
            break
        if k == s.max_iter:
            break
        alpha = 1.0 / (k + 1)
        eta = mix(eta, br, alpha) if alpha < 1.0 else br
        if len(eta) > s.max_paths:
            eta = systematic_resample(eta, s.max_paths, rng)
            flow = eta.flow()
            running = _running_for(model, dom, flow, s.grid_points)
        else:
            flow = eta.flow()
            if isinstance(running, KernelGrid1D):
                running = running.mixed(KernelGrid1D.tabulate(cpl.kernel, br.flow(), running.xs), alpha)
            elif isinstance(running, KernelExact):
                running = KernelExact(cpl.kernel, flow)
        warm = br
    # the coupling flow is the one the final best response was computed against
    res = EquilibriumResult(dom, model, m0, br, br.flow(), flow, trace, converged, s, costs, running)
    res.ties = _count_ties(res)
    if strict and not converged:
        raise NotConverged(f"residual {trace[-1]:.3e} above tol {s.tol:g} after {res.iterations} iterations", res)
    return res


def _count_ties(res: EquilibriumResult, path_tol=1e-3):
    """Particles whose cold-started best response is a different path of equal cost."""
    prob = res.problem
    ties = 0
    for j in range(len(res.m0)):
        traj, _, val = solve_trajectory(prob, 0.0, res.m0.points[j], tol=1e-8, raise_on_fail=False)
        if np.max(np.abs(traj.nodes - res.eta.paths[j])) > path_tol and abs(val - res.costs[j]) <= res.settings.tol_opt:
            ties += 1
    return ties


def mild_solution(result: EquilibriumResult):
    """(u sampler, m flow) of the computed equilibrium."""
    return result.sampler, result.flow


# -- export ----------------------------------------------------------------------------

def flow_csv(flow: MeasureFlow) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "particle", *[f"x{i}" for i in range(flow.dim)], "weight"])
    for i, t in enumerate(flow.times):
        for j in range(flow.points.shape[1]):
            w.writerow([fmt(t), j, *(fmt(c) for c in flow.points[i, j]), fmt(flow.weights[j])])
    return buf.getvalue()


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "eps"])
    for k, e in enumerate(trace):
        w.writerow([k, fmt(e)])
    return buf.getvalue()


def result_summary(res: EquilibriumResult) -> dict:
    """Structured summary written to report.json."""
    return {
        "converged": bool(res.converged),
        "iterations": res.iterations,
        "final_residual": float(res.residual),
        "tol": res.settings.tol,
        "n_particles": len(res.m0),
        "n_times": res.settings.n_times,
        "ties": res.ties,
        "flow_lipschitz": res.flow.lipschitz_estimate(),
        "max_speed": res.flow.max_speed(),
        "coupling_gap": float(np.max(flow_distances(res.flow, res.coupling_flow))),
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
