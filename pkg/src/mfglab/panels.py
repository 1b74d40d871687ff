"""Verification panels run against a computed mild solution.

Each panel returns a :class:`PanelResult` with a pass flag, a JSON-ready
summary and one or more CSV tables.  Panels only read the solution, so the
runner can call them in any order; the tables they produce depend only on
the config and the seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumResult
from .errors import NoInteriorApproach, NotOnSupport
from .pdecheck import (BOUNDARY, BOUNDARY_TOL, INTERIOR, BumpTestFunction, SupportClassifier,
                       continuity_residual, gradient_limit_check, hjb_residual_boundary,
                       hjb_residual_interior, particle_velocity_consistency, random_bumps,
                       support_probes, velocity_field, viscosity_checks)
from .trajopt import fmt
from .valuefn import (dyadic_scales, fit_power_law, semiconcavity_probe, sensitivity_probe,
                      superdifferential)

# defects below this are treated as rounding noise
DEFECT_FLOOR = 1e-10


@dataclass
class PanelResult:
    name: str
    gated: bool
    passed: bool
    summary: dict
    tables: dict = field(default_factory=dict)  # suffix -> (header, rows)
    claims: list = field(default_factory=list)

    def csv(self, suffix="") -> str:
        header, rows = self.tables[suffix]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
        return buf.getvalue()

    def filenames(self):
        return {suffix: f"panel_{self.name}{'_' + suffix if suffix else ''}.csv" for suffix in self.tables}

    def report(self) -> dict:
        return {"gated": self.gated, "passed": bool(self.passed), "claims": _plain(self.claims),
                "summary": _plain(self.summary), "files": sorted(self.filenames().values())}


def claim(name, n_probes, value, tolerance, sense="<="):
    """One checked statement: ``value`` against ``tolerance`` over ``n_probes`` probes."""
    ok = value <= tolerance if sense == "<=" else value >= tolerance
    return {"claim": name, "n_probes": int(n_probes), "value": value, "sense": sense, "tolerance": tolerance,
            "passed": bool(ok)}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


class MildContext:
    """A mild solution (u sampler, m flow) with a support classifier and lazy velocity field."""

    def __init__(self, result: EquilibriumResult, delta_b=None, delta_m=None, seed=0):
        self.result = result
        self.sampler = result.sampler
        self.flow = result.flow
        self.dom = result.dom
        self.seed = seed
        self.classifier = SupportClassifier(self.flow, self.dom, delta_b, delta_m)
        self._V = None
        self._vel = None

    @property
    def T(self):
        return self.sampler.T

    @property
    def velocity(self):
        if self._V is None:
            self._V = velocity_field(self.sampler, self.flow, self.classifier, paths=self.result.eta)
        return self._V

    def velocities_on_flow(self):
        if self._vel is None:
            self._vel = self.velocity.on_flow()
        return self._vel

    def probes(self, n_interior, n_boundary):
        return support_probes(self.flow, self.dom, self.classifier, n_interior, n_boundary, seed=self.seed)


def _xcols(dim):
    return [f"x{i}" for i in range(dim)]


def _pt(x):
    return [float(c) for c in np.atleast_1d(x)]


def _even(items, n):
    """n items spread evenly over a list, in order."""
    if len(items) <= n:
        return list(items)
    idx = np.unique(np.linspace(0, len(items) - 1, n).round().astype(int))
    return [items[k] for k in idx]


# -- HJB on the support ---------------------------------------------------------------

def hjb_panel(ctx: MildContext, opts: dict, point=None) -> PanelResult:
    if point is not None:
        t, x = point
        kind = ctx.classifier.classify(t, x)
        if kind == INTERIOR:
            ip, bp = [(t, np.atleast_1d(x))], []
        elif kind == BOUNDARY:
            ip, bp = [], [(t, np.atleast_1d(x))]
        else:
            raise NotOnSupport(f"(t={t}, x={[float(c) for c in np.atleast_1d(x)]}) is not on the support of m")
    else:
        ip, bp = ctx.probes(opts["n_interior"], opts["n_boundary"])
    rows = []
    ri = []
    for t, x in ip:
        r = hjb_residual_interior(ctx.sampler, ctx.flow, t, x, ctx.classifier)
        ri.append(r)
        rows.append(["interior", t, *_pt(x), r, np.nan, np.nan, np.nan])
    rt, rf = [], []
    for t, x in bp:
        b = hjb_residual_boundary(ctx.sampler, ctx.flow, t, x, ctx.classifier)
        rt.append(b.tangential)
        rf.append(b.full)
        rows.append(["boundary", t, *_pt(x), np.nan, b.tangential, b.full, b.lambda_plus])
    mi = max(ri, default=0.0)
    mt = max(rt, default=0.0)
    mf = max(rf, default=0.0)
    passed = mi <= opts["tol_interior"] and mt <= opts["tol_boundary"] and mf <= opts["tol_boundary"]
    summary = {"n_interior": len(ip), "n_boundary": len(bp), "max_interior": mi, "max_tangential": mt,
               "max_full": mf, "tol_interior": opts["tol_interior"], "tol_boundary": opts["tol_boundary"],
               "delta_b": ctx.classifier.delta_b, "delta_m": ctx.classifier.delta_m}
    header = ["kind", "t", *_xcols(ctx.dom.dim), "residual", "tangential", "full", "lambda_plus"]
    claims = [claim("hjb-interior", len(ip), mi, opts["tol_interior"]),
              claim("hjb-boundary-tangential", len(bp), mt, opts["tol_boundary"]),
              claim("hjb-boundary-lambda-plus-form", len(bp), mf, opts["tol_boundary"])]
    return PanelResult("hjb", opts["gated"], passed, summary, {"": (header, rows)}, claims)


# -- lambda_+ tangency and gradient limits ----------------------------------------------

def lambda_plus_panel(ctx: MildContext, opts: dict, point=None) -> PanelResult:
    if point is not None:
        t, x = point
        if ctx.classifier.classify(t, x) != BOUNDARY:
            raise NotOnSupport(f"(t={t}, x={[float(c) for c in np.atleast_1d(x)]}) is not a boundary support point")
        bp = [(t, np.atleast_1d(x))]
    else:
        _, bp = ctx.probes(0, opts["n_boundary"])
    rows, tang = [], []
    for t, x in bp:
        b = hjb_residual_boundary(ctx.sampler, ctx.flow, t, x, ctx.classifier)
        tang.append(b.tangency)
        rows.append([t, *_pt(x), *_pt(b.p_tau), b.lambda_plus, b.tangency])
    lim_rows, monotone, skipped = [], [], 0
    radii = tuple(opts["radii"])
    # near T the wall only reaches a thin layer, so keep the radii small against the time left
    for t, x in _even(_window_probes(ctx, bp, 5.0 * max(radii)), opts["n_limit"]):
        try:
            g = gradient_limit_check(ctx.sampler, ctx.flow, t, x, radii)
        except NoInteriorApproach:
            skipped += 1
            continue
        monotone.append(bool(g["monotone"]))
        for r, d in zip(g["radii"], g["interior"]):
            lim_rows.append([t, *_pt(x), r, d])
    mt = max(tang, default=0.0)
    passed = mt <= opts["tol_tangency"] and all(monotone)
    summary = {"n_boundary": len(bp), "max_tangency": mt, "tol_tangency": opts["tol_tangency"],
               "n_limit": len(monotone), "limit_monotone": all(monotone), "limit_skipped": skipped,
               "max_abs_lambda_plus": max((abs(r[-2]) for r in rows), default=0.0)}
    xc = _xcols(ctx.dom.dim)
    tables = {"": (["t", *xc, *[f"p_tau{i}" for i in range(ctx.dom.dim)], "lambda_plus", "tangency"], rows),
              "limits": (["t", *xc, "r", "distance"], lim_rows)}
    claims = [claim("lambda-plus-tangency", len(bp), mt, opts["tol_tangency"]),
              claim("gradient-limit-non-monotone", len(monotone), len(monotone) - sum(monotone), 0)]
    return PanelResult("lambda-plus", opts["gated"], passed, summary, tables, claims)


# -- continuity equation ------------------------------------------------------------------

def continuity_panel(ctx: MildContext, opts: dict, point=None, width=None) -> PanelResult:
    if point is not None:
        t, x = point
        w = width if width is not None else 0.1
        bumps = [BumpTestFunction(float(t), float(w) * ctx.T, tuple(_pt(x)),
                                  tuple([float(w) * ctx.dom.diameter] * ctx.dom.dim))]
    else:
        bumps = random_bumps(ctx.dom, ctx.T, opts["n_bumps"], seed=ctx.seed)
    vel = ctx.velocities_on_flow()
    rows, res = [], []
    for k, f in enumerate(bumps):
        r = continuity_residual(ctx.flow, ctx.velocity, f, vel)
        res.append(r)
        rows.append([k, f.ct, f.wt, *[float(c) for c in f.cx], *[float(c) for c in f.wx], r])
    pvc = particle_velocity_consistency(ctx.result.eta, ctx.velocity)
    mr = max(res, default=0.0)
    passed = mr <= opts["tol"] and pvc <= opts["tol_velocity"]
    summary = {"n_bumps": len(bumps), "max_residual": mr, "tol": opts["tol"],
               "particle_velocity": pvc, "tol_velocity": opts["tol_velocity"]}
    d = ctx.dom.dim
    header = ["bump", "ct", "wt", *[f"cx{i}" for i in range(d)], *[f"wx{i}" for i in range(d)], "residual"]
    claims = [claim("continuity-weak-residual", len(bumps), mr, opts["tol"]),
              claim("particle-velocity", len(ctx.result.eta), pvc, opts["tol_velocity"])]
    return PanelResult("continuity", opts["gated"], passed, summary, {"": (header, rows)}, claims)


# -- superdifferential structure --------------------------------------------------------------

def _window_probes(ctx: MildContext, probes, margin):
    hi = ctx.T - ctx.sampler.eps - margin
    return [(t, x) for t, x in probes if margin <= t <= hi]


def superdiff_panel(ctx: MildContext, opts: dict, point=None, r=None) -> PanelResult:
    r = float(r if r is not None else opts["r"])
    if point is not None:
        pts = [(point[0], np.atleast_1d(point[1]))]
    else:
        ip, bp = ctx.probes(200, 200)
        nb = opts["n_points"] // 2
        bp = _even(_window_probes(ctx, bp, 2 * r), nb)
        ip = [(t, x) for t, x in ip if ctx.dom.b(x)[0] < -2 * r]
        ip = _even(_window_probes(ctx, ip, 2 * r), opts["n_points"] - len(bp))
        pts = bp + ip
    rows, rays = [], []
    dim = ctx.dom.dim
    for t, x in pts:
        est = superdifferential(ctx.sampler, t, x, r=r, extrapolate=True)
        ray = est.is_ray(opts["ray_tol"]) if est.boundary else None
        if ray is not None:
            rays.append(ray)
        rows.append([t, *_pt(x), int(est.boundary), *[float(v) for v in est.lower],
                     *[float(v) for v in est.upper],
                     float(est.lambda_max) if est.boundary else np.nan, "" if ray is None else int(ray)])
    visc = viscosity_checks(ctx.sampler, pts, r=r, tol=opts["viscosity_tol"]) if pts else \
        {"super_max": 0.0, "sub_min": 0.0, "super_pass": True, "sub_pass": True}
    passed = all(rays) and bool(visc["super_pass"]) and bool(visc["sub_pass"])
    summary = {"n_points": len(pts), "n_boundary": len(rays), "rays": all(rays), **visc, "r": r}
    slopes = ["q_t", *[f"q_x{i}" for i in range(dim)]]
    header = ["t", *_xcols(dim), "boundary", *[s + "_lower" for s in slopes], *[s + "_upper" for s in slopes],
              "lambda_max", "is_ray"]
    claims = [claim("boundary-slopes-not-ray", len(rays), len(rays) - sum(rays), 0),
              claim("viscosity-super", len(pts), visc["super_max"], opts["viscosity_tol"]),
              claim("viscosity-sub", len(pts), visc["sub_min"], -opts["viscosity_tol"], ">=")]
    return PanelResult("superdiff", opts["gated"], passed, summary, {"": (header, rows)}, claims)


# -- dyadic sweeps ---------------------------------------------------------------------------------

def _scales(opts, rmin=None, rmax=None):
    sc = dyadic_scales(opts["k_min"], opts["k_max"])
    if rmin is not None:
        sc = [s for s in sc if s >= rmin * (1 - 1e-12)]
    if rmax is not None:
        sc = [s for s in sc if s <= rmax * (1 + 1e-12)]
    if not sc:
        raise ValueError("no dyadic scale in [rmin, rmax]")
    return sc


def _sweep_points(ctx: MildContext, opts, hmax, point, time_margin_low):
    if point is not None:
        return [(float(point[0]), np.atleast_1d(np.asarray(point[1], dtype=float)))]
    if opts.get("points"):
        return [(float(p[0]), np.asarray(p[1:], dtype=float)) for p in opts["points"]]
    ip, bp = ctx.probes(400, 400)
    nb = opts["n_points"] // 2
    bp = _even(_window_probes(ctx, bp, 0.0), len(bp))
    bp = [(t, x) for t, x in bp if time_margin_low <= t <= ctx.T - ctx.sampler.eps - hmax]
    ip = [(t, x) for t, x in ip
          if ctx.dom.b(x)[0] < -4 * hmax and time_margin_low <= t <= ctx.T - ctx.sampler.eps - hmax]
    bp = _even(bp, nb)
    return bp + _even(ip, opts["n_points"] - len(bp))


def _direction(dom, x):
    """Unit stencil direction: inward normal at boundary points, first coordinate axis inside."""
    if abs(dom.b(x)[0]) <= BOUNDARY_TOL:
        return -dom.normal(x)[0], True
    e = np.zeros(dom.dim)
    e[0] = 1.0
    return e, False


def semiconcavity_panel(ctx: MildContext, opts: dict, point=None, rmin=None, rmax=None) -> PanelResult:
    """Centred defects with h = sigma over dyadic scales and their fitted log-log exponent.

    At a boundary point x the stencil is centred at x + h e with e the
    inward normal, so its outer node is x itself.
    """
    scales = _scales(opts, rmin, rmax)
    pts = _sweep_points(ctx, opts, max(scales), point, max(scales))
    dom = ctx.dom
    rows, fits, ok = [], [], []
    for k, (t, x) in enumerate(pts):
        e, bd = _direction(dom, x)
        defects = []
        for h in scales:
            centre = x + h * e if bd else x
            d = semiconcavity_probe(ctx.sampler, t, centre, h * e, h)
            defects.append(d)
            rows.append([k, "boundary" if bd else "interior", t, *_pt(x), h, d])
        flat = max(abs(d) for d in defects) <= DEFECT_FLOOR
        alpha, c = (np.inf, 0.0) if flat else fit_power_law(scales, defects)
        need = opts["min_exponent_boundary"] if bd else opts["min_exponent_interior"]
        good = bool(alpha >= need)
        ok.append(good)
        fits.append([k, "boundary" if bd else "interior", t, *_pt(x), alpha, c, need, int(good)])
    summary = {"n_points": len(pts), "scales": scales,
               "min_exponent_boundary": min((f[-4] for f in fits if f[1] == "boundary"), default=None),
               "min_exponent_interior": min((f[-4] for f in fits if f[1] == "interior"), default=None)}
    xc = _xcols(dom.dim)
    tables = {"": (["point", "kind", "t", *xc, "r", "defect"], rows),
              "fit": (["point", "kind", "t", *xc, "exponent", "constant", "required", "passed"], fits)}
    claims = []
    for kind in ("boundary", "interior"):
        sel = [f for f in fits if f[1] == kind]
        if sel:
            claims.append(claim(f"semiconcavity-exponent-{kind}", len(sel), min(f[-4] for f in sel),
                                opts[f"min_exponent_{kind}"], ">="))
    return PanelResult("semiconcavity", opts["gated"], all(ok), summary, tables, claims)


def envelope_constant(ratios) -> float:
    """Geometric mean over scales of the largest positive ratio at each scale.

    ``ratios`` has shape (n_points, n_scales).  Returns 0 when no ratio is positive.
    """
    top = np.max(np.asarray(ratios, dtype=float), axis=0)
    top = top[top > 0]
    return float(np.exp(np.mean(np.log(top)))) if top.size else 0.0


def sensitivity_panel(ctx: MildContext, opts: dict, point=None, rmin=None, rmax=None) -> PanelResult:
    """u(t+s, x+h) - u(t, x) - s (H - F)(x, p(t)) - <p(t), h> over dyadic h = s, scaled by (|h| + s)^{3/2}.

    p(t) is the dual arc at the start of the optimal path from (t, x).  The
    step h points inward at boundary points and along the first axis inside.
    """
    scales = _scales(opts, rmin, rmax)
    pts = _sweep_points(ctx, opts, max(scales), point, 0.0)
    dom = ctx.dom
    rows, ratios = [], []
    for k, (t, x) in enumerate(pts):
        e, bd = _direction(dom, x)
        p = ctx.sampler.gradient(t, x)
        line = []
        for h in scales:
            d = sensitivity_probe(ctx.sampler, t, x, p, h * e, h)
            ratio = d / (2 * h) ** 1.5
            line.append(ratio)
            rows.append([k, "boundary" if bd else "interior", t, *_pt(x), h, d, ratio])
        ratios.append(line)
    C = envelope_constant(ratios) if ratios else 0.0
    worst = float(np.max(ratios)) if ratios else 0.0
    floor = DEFECT_FLOOR / (2 * min(scales)) ** 1.5
    passed = worst <= opts["factor"] * C + floor
    summary = {"n_points": len(pts), "n_boundary": sum(1 for r in rows if r[1] == "boundary") // len(scales),
               "fitted_constant": C, "max_ratio": worst, "factor": opts["factor"],
               "max_over_fit": worst / C if C > 0 else 0.0, "scales": scales}
    header = ["point", "kind", "t", *_xcols(dom.dim), "h", "defect", "ratio"]
    claims = [claim("sensitivity-envelope", len(pts), worst, opts["factor"] * C + floor)]
    return PanelResult("sensitivity", opts["gated"], passed, summary, {"": (header, rows)}, claims)


PANEL_FUNCS = {
    "hjb": hjb_panel,
    "lambda-plus": lambda_plus_panel,
    "continuity": continuity_panel,
    "superdiff": superdiff_panel,
    "semiconcavity": semiconcavity_panel,
    "sensitivity": sensitivity_panel,
}
