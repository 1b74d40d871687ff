"""Command line runner: ``mfglab run <config>`` and ``mfglab probe <config> <panel>``.

Exit codes: 0 when every gated panel passes, 2 when the fixed point did not
converge (trace and flow are still written), 3 when a gated panel fails and
1 on any error, including config validation.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PANEL_DEFAULTS, PANELS, SCHEMA_VERSION, config_hash, load
from .equilibrium import (EquilibriumResult, EquilibriumSettings, _running_for, dumps, flow_csv, ingest_m0,
                          result_summary, solve_equilibrium, trace_csv)
from .errors import MfgLabError
from .geometry import Domain
from .measures import MeasureFlow, PathMeasure
from .model import Model
from .panels import PANEL_FUNCS, MildContext

log = logging.getLogger("mfglab")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_PANEL_FAILED = 0, 1, 2, 3
CACHE_NAME = "equilibrium.npz"


# -- pipeline pieces -----------------------------------------------------------------------

def build(cfg: dict):
    """(domain, model, m0, settings) from a canonical config."""
    dom = Domain.from_config(cfg["domain"])
    model = Model.from_config(cfg["model"], dom.dim)
    m0 = ingest_m0(cfg["m0"], dom, seed=cfg["seed"])
    sv, fp = cfg["solver"], cfg["fixed_point"]
    settings = EquilibriumSettings(T=cfg["time"]["T"], n_times=cfg["time"]["nodes"], tol=fp["tol"],
                                   max_iter=fp["K_max"], init=fp["init"], seed=cfg["seed"],
                                   max_paths=sv["max_paths"], sampler_steps=sv["sampler_steps"],
                                   grid_points=sv["grid_points"], tol_opt=sv["tol_opt"])
    return dom, model, m0, settings


def solve(cfg: dict) -> EquilibriumResult:
    dom, model, m0, settings = build(cfg)
    return solve_equilibrium(dom, model, m0, settings,
                             log=lambda k, eps: log.info("iteration %d: eps = %.3e", k, eps))


def save_cache(path: Path, digest: str, res: EquilibriumResult):
    cf = res.coupling_flow
    np.savez(path, digest=np.array(digest), times=res.eta.times, paths=res.eta.paths, weights=res.eta.weights,
             cf_times=cf.times, cf_points=cf.points, cf_weights=cf.weights, trace=np.array(res.trace),
             converged=np.array(res.converged), costs=res.costs, ties=np.array(res.ties))


def load_cache(path: Path, cfg: dict, digest: str) -> EquilibriumResult | None:
    """Rebuild a saved result when its config hash matches; otherwise None."""
    if not path.exists():
        return None
    with np.load(path) as z:
        if str(z["digest"]) != digest:
            return None
        data = {k: z[k] for k in z.files}
    dom, model, m0, settings = build(cfg)
    eta = PathMeasure(data["times"], data["paths"], data["weights"])
    cf = MeasureFlow(data["cf_times"], data["cf_points"], data["cf_weights"])
    running = _running_for(model, dom, cf, settings.grid_points)
    return EquilibriumResult(dom, model, m0, eta, eta.flow(), cf, [float(e) for e in data["trace"]],
                             bool(data["converged"]), settings, data["costs"], running, int(data["ties"]))


def resolve_config(path) -> Path:
    """A config file path, or the name of a bundled scenario."""
    p = Path(path)
    if p.exists():
        return p
    from .scenarios import list_scenarios, scenario_path
    if str(path) in list_scenarios():
        return Path(str(scenario_path(str(path))))
    return p


def _write(outdir: Path, files: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(files.items()):
        (outdir / name).write_text(text)


def _report(cfg, digest, status, code, **extra) -> dict:
    rep = {"schema_version": SCHEMA_VERSION, "tool": "mfglab", "version": __version__, "name": cfg.get("name"),
           "config_hash": digest, "seed": cfg.get("seed"), "config": cfg, "status": status, "exit_code": code}
    rep.update(extra)
    return rep


# -- commands ----------------------------------------------------------------------------------------

def run(config_path, outdir=None) -> int:
    """Equilibrium, mild solution and the configured panels; writes report.json and CSVs."""
    try:
        cfg = load(resolve_config(config_path))
    except (MfgLabError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    out = Path(outdir or cfg["output"]["dir"])
    digest = config_hash(cfg)
    files = {}
    timings = {}
    try:
        t0 = time.perf_counter()
        res = solve(cfg)
        timings["equilibrium"] = time.perf_counter() - t0
        files["trace.csv"] = trace_csv(res.trace)
        files["flow.csv"] = flow_csv(res.flow)
        files["coupling_flow.csv"] = flow_csv(res.coupling_flow)
        eq = result_summary(res)
        if not res.converged:
            log.error("fixed point not converged: residual %.3e after %d iterations", res.residual, res.iterations)
            rep = _report(cfg, digest, "not_converged", EXIT_NOT_CONVERGED, equilibrium=eq, panels={},
                          files=sorted(files), timings=timings)
            files["report.json"] = dumps(rep) + "\n"
            _write(out, files)
            return EXIT_NOT_CONVERGED
        out.mkdir(parents=True, exist_ok=True)
        save_cache(out / CACHE_NAME, digest, res)
        ctx = MildContext(res, cfg["solver"]["delta_b"], cfg["solver"]["delta_m"], seed=cfg["seed"])
        panels = {}
        for name in PANELS:
            if name not in cfg["panels"]:
                continue
            t0 = time.perf_counter()
            pr = PANEL_FUNCS[name](ctx, cfg["panels"][name])
            timings[name] = time.perf_counter() - t0
            log.info("panel %s: %s", name, "pass" if pr.passed else "FAIL")
            for suffix, fname in pr.filenames().items():
                files[fname] = pr.csv(suffix)
            panels[name] = pr.report()
        failed = [n for n, p in panels.items() if p["gated"] and not p["passed"]]
        code = EXIT_PANEL_FAILED if failed else EXIT_OK
        rep = _report(cfg, digest, "panel_failed" if failed else "passed", code, equilibrium=eq, panels=panels,
                      failed_panels=failed, files=sorted(files), timings=timings)
        files["report.json"] = dumps(rep) + "\n"
        _write(out, files)
        return code
    except MfgLabError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        rep = _report(cfg, digest, "error", EXIT_ERROR, error=f"{type(exc).__name__}: {exc}",
                      files=sorted(files), timings=timings)
        files["report.json"] = dumps(rep) + "\n"
        _write(out, files)
        return EXIT_ERROR


def probe(config_path, panel, t=None, x=None, rmin=None, rmax=None, outdir=None) -> int:
    """Run one panel, optionally at a single point, against a cached or fresh mild solution."""
    if panel not in PANELS:
        log.error("unknown panel %r (choose from %s)", panel, ", ".join(PANELS))
        return EXIT_ERROR
    if (t is None) != (x is None):
        log.error("--t and --x must be given together")
        return EXIT_ERROR
    try:
        cfg = load(resolve_config(config_path))
        out = Path(outdir or cfg["output"]["dir"])
        digest = config_hash(cfg)
        res = load_cache(out / CACHE_NAME, cfg, digest)
        if res is None:
            res = solve(cfg)
            if not res.converged:
                log.error("fixed point not converged: residual %.3e", res.residual)
                _write(out, {"trace.csv": trace_csv(res.trace)})
                return EXIT_NOT_CONVERGED
        opts = {**PANEL_DEFAULTS[panel], **cfg["panels"].get(panel, {})}
        ctx = MildContext(res, cfg["solver"]["delta_b"], cfg["solver"]["delta_m"], seed=cfg["seed"])
        point = None if t is None else (float(t), np.asarray(x, dtype=float))
        if point is not None and point[1].shape[0] != res.dom.dim:
            log.error("--x needs %d coordinates", res.dom.dim)
            return EXIT_ERROR
        kw = {}
        if panel in ("semiconcavity", "sensitivity"):
            kw = {"rmin": rmin, "rmax": rmax}
        elif panel == "superdiff" and rmax is not None:
            kw = {"r": rmax}
        elif panel == "continuity" and rmax is not None:
            kw = {"width": rmax}
        elif panel == "lambda-plus" and rmax is not None:
            opts["radii"] = [rmax, rmax / 2, rmax / 4]
        pr = PANEL_FUNCS[panel](ctx, opts, point=point, **kw)
    except (MfgLabError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    files = {f"probe_{Path(f).name[len('panel_'):]}": pr.csv(s) for s, f in pr.filenames().items()}
    files[f"probe_{panel}.json"] = dumps(pr.report()) + "\n"
    _write(out, files)
    sys.stdout.write(pr.csv(""))
    if pr.passed or not pr.gated:
        return EXIT_OK
    return EXIT_PANEL_FAILED


# -- entry point -----------------------------------------------------------------------------------

def _parser():
    ap = argparse.ArgumentParser(prog="mfglab", description="State-constrained mean field games lab")
    ap.add_argument("--version", action="version", version=f"mfglab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log fixed-point iterations")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="solve the equilibrium and run the configured panels")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: output.dir of the config)")
    p = sub.add_parser("probe", help="run one verification panel")
    p.add_argument("config")
    p.add_argument("panel", choices=PANELS)
    p.add_argument("--t", type=float)
    p.add_argument("--x", type=float, nargs="+")
    p.add_argument("--rmin", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--out")
    s = sub.add_parser("scenarios", help="list or print bundled scenario configs")
    s.add_argument("name", nargs="?")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="mfglab: %(message)s", stream=sys.stderr)
    if args.command == "run":
        return run(args.config, args.out)
    if args.command == "probe":
        return probe(args.config, args.panel, args.t, args.x, args.rmin, args.rmax, args.out)
    from .scenarios import list_scenarios, scenario_path
    if args.name is None:
        sys.stdout.write("\n".join(list_scenarios()) + "\n")
        return EXIT_OK
    try:
        sys.stdout.write(Path(scenario_path(args.name)).read_text())
    except KeyError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
