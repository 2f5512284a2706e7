"""Command-line entry point: ``levyhom <subcommand> --config FILE``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .effective import build_cell_operator, effective_model, principal_eigenfunction
from .errors import ConfigError, NumericalError
from .experiments import _environment, _jsonable, ergodic_average_check, gamma_values, run_sweep, write_report
from .kernels import NonSymKernel, P2Kernel, Q2Kernel, check_ellipticity, check_symmetry
from .matrixio import write_matrix
from .operator import assemble, build_grid
from .solvers import solve_plaplace, solve_resolvent

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

EPILOG = """exit codes:
  0  success
  2  invalid config (schema, unknown keys, field bounds)
  3  numerical failure (non-convergence, lost positivity)
  4  file I/O error
"""


def _dump(doc):
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


class Run:
    """Shared state of one invocation."""

    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config)
        self.out = Path(args.out or self.cfg.doc.get("output") or "levyhom_out")
        if args.out is None and self.cfg.doc.get("output"):
            self.out = self.cfg.path(self.cfg.doc["output"])
        self.threads = args.threads or int(os.environ.get("LEVYHOM_THREADS", "0") or 0) or int(self.cfg.doc.get("threads", 1))

    def seeds(self, minimum=1):
        seeds = [int(s) for s in self.cfg.doc.get("seeds", [0])]
        if self.args.seed is not None:
            # shift the configured list so its length (and any minimum count) is kept
            seeds = [self.args.seed + i for i in range(max(len(seeds), minimum) if minimum > 1 else 1)]
        return seeds

    def report(self, name, doc):
        doc = dict(doc, config=self.cfg.resolved(), environment=_environment())
        if self.args.seed is not None:
            doc["seed_override"] = self.args.seed
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"{name}.json"
        path.write_text(_dump(doc))
        return path

    def say(self, text):
        if not self.args.quiet:
            print(text)


def cmd_effective(run):
    cfg = run.cfg
    cp = cfg.cell_params()
    res = effective_model(cfg.model(), cell_N=cp.get("N"), tol=float(cp.get("tol", 1e-12)), R_img=int(cp.get("R_img", 8)))
    info = {k: v for k, v in res.info.items() if k != "solution"}
    run.report("effective", {"lambda_eff": res.value, "info": info})
    run.say(f"lambda_eff = {res.value!r}")


def _cell_table(cfg):
    doc = cfg.doc
    if "kernel" in doc:
        return cfg.pair_table(doc["kernel"])
    if cfg.case == "p1":
        from .kernels import make_pair_table

        model = cfg.model()
        return make_pair_table(cfg.d, model.lam.N, np.multiply.outer(model.lam.samples, model.mu.samples))
    raise ConfigError("cell problem needs a 'kernel' table or rule")


def cmd_cell(run):
    cfg = run.cfg
    cp = cfg.cell_params()
    table = _cell_table(cfg)
    disc = build_cell_operator(table, cfg.alpha, cfg.gamma, N=cp.get("N"), R_img=int(cp.get("R_img", 8)))
    t0 = time.perf_counter()
    sol = principal_eigenfunction(disc, tol=float(cp.get("tol", 1e-12)), max_iter=int(cp.get("max_iter", 100_000)))
    run.out.mkdir(parents=True, exist_ok=True)
    p0_path = run.out / "p0.txt"
    write_matrix(p0_path, sol.p0.samples)
    doc = dict(sol.as_dict(), p0=str(p0_path), N=disc.N)
    if run.args.timing:
        doc["wall_ms"] = round(1e3 * (time.perf_counter() - t0), 3)
    run.report("cell", doc)
    run.say(f"lambda_eff = {sol.lambda_eff!r}  eigenvalue = {sol.eigenvalue!r}  residual = {sol.residual:.3e}")


def cmd_solve(run):
    cfg = run.cfg
    doc = cfg.doc
    eps_list = cfg.eps_list()
    if len(eps_list) != 1:
        raise ConfigError("solve takes a single eps")
    eps = eps_list[0]
    gp = cfg.grid_params()
    h = float(gp["h"]) if "h" in gp else eps / int(gp.get("K", 8))
    grid = build_grid(cfg.d, float(gp.get("R_dom", 2.0)), h)
    model = cfg.model()
    seed = run.seeds()[0] if model.random else None
    if doc.get("effective", False):
        cp = cfg.cell_params()
        model, eps = effective_model(model, cell_N=cp.get("N")).model, 1.0
    op = assemble(model, eps, grid, r_near=gp.get("r_near"), seed=seed)
    f = np.asarray(cfg.source()(grid.centers()), dtype=float).reshape(grid.n)
    m, p = float(doc.get("m", 1.0)), float(doc.get("p", 2.0))
    if p == 2.0:
        res = solve_resolvent(op, m, -f, tol=float(doc.get("tol", 1e-8)), method=doc.get("method", "auto"))
    else:
        res = solve_plaplace(op, p, m, f, tol=float(doc.get("nl_tol", 1e-6)))
    run.out.mkdir(parents=True, exist_ok=True)
    u_path = run.out / "u.txt"
    write_matrix(u_path, res.u.reshape(grid.shape))
    summary = res.summary()
    if not run.args.timing:
        summary["wall_ms"] = 0.0
    run.report("solve", dict(summary, u=str(u_path), eps=eps, seed=seed, h=h, n=grid.n))
    run.say(f"iterations = {res.iterations}  residual = {res.residual:.3e}  -> {u_path}")


def _sweep_cfg(run, minimum=1):
    model_random = run.cfg.case in ("q1",)
    seeds = run.seeds(minimum) if model_random else None
    return run.cfg.sweep_config(seeds=seeds, threads=run.threads, timing=run.args.timing)


def cmd_sweep(run):
    scfg = _sweep_cfg(run)
    rep = run_sweep(scfg)
    echo = dict(run.cfg.resolved())
    csv_path, json_path = write_report(rep, run.out, echo=echo)
    run.say(f"lambda_eff = {rep.lambda_eff!r}")
    for r in rep.records:
        run.say(f"eps = {r.eps:<10g} seed = {r.seed:<4d} rel_l2_error = {r.rel_error:.6e}")
    run.say(f"wrote {csv_path} and {json_path}")


def cmd_gamma(run):
    scfg = _sweep_cfg(run)
    vals = gamma_values(scfg)
    rep = vals.pop("report")
    write_report(rep, run.out, echo=run.cfg.resolved(), stem="gamma_sweep")
    run.report("gamma", vals)
    for e, fe in zip(vals["eps"], vals["F_eps"]):
        run.say(f"eps = {e:<10g} F_eps = {fe!r}")
    run.say(f"F_eff = {vals['F_eff']!r}")


def cmd_ergodic(run):
    cfg = run.cfg
    ep = cfg.ergodic_params()
    box = ep.get("box")
    if box is None or len(box) != 4:
        raise ConfigError("ergodic.box must be [x_lo, x_hi, y_lo, y_hi]")
    eps = ep.get("eps", cfg.doc.get("eps"))
    if eps is None:
        raise ConfigError("ergodic check needs an eps list")
    res = ergodic_average_check(cfg.model(), box, [float(e) for e in eps], run.seeds(minimum=10),
                                points_per_period=int(ep.get("points_per_period", 8)))
    run.report("ergodic", res)
    for e, dev in zip(res["eps"], res["mean_deviation"]):
        run.say(f"eps = {e:<10g} mean_deviation = {dev:.6e}")


def cmd_validate(run):
    cfg = run.cfg
    model = cfg.model()
    budget = 1000
    checks = [check_ellipticity(model, budget)]
    if isinstance(model, (P2Kernel, Q2Kernel)):
        checks.append(check_symmetry(model, budget))
    if isinstance(model, NonSymKernel) and model.lipschitz is not None:
        q = model.table.lipschitz_quotient()
        if q > model.lipschitz:
            raise ConfigError(f"kernel table Lipschitz quotient {q:.6g} exceeds the bound {model.lipschitz}")
    for c in checks:
        if not c.passed:
            w = c.witness or {}
            raise ConfigError(
                f"{c.check} check failed: {w.get('part', 'kernel')} value {w.get('value')!r} "
                f"at cell {tuple(w.get('cell', ()))} outside [{c.lower:.6g}, {c.upper:.6g}]"
                if c.check == "ellipticity" else f"{c.check} check failed: {w}"
            )
    run.say(f"ok: {cfg.case} config passes {', '.join(c.check for c in checks)}")


COMMANDS = {
    "effective": (cmd_effective, "compute the effective kernel coefficient"),
    "cell": (cmd_cell, "solve the torus cell problem for p0"),
    "solve": (cmd_solve, "solve one resolvent or p-Laplace problem"),
    "sweep": (cmd_sweep, "run an eps sweep against the effective solution"),
    "gamma": (cmd_gamma, "minimum values of the quadratic functionals along a sweep"),
    "ergodic": (cmd_ergodic, "box averages of a random kernel against their limit"),
    "validate": (cmd_validate, "check a config and its fields without writing anything"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="levyhom", description=__doc__, epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="YAML or JSON config file")
        p.add_argument("--out", default=None, help="output directory (default: config 'output' or ./levyhom_out)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed(s)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: LEVYHOM_THREADS)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.add_argument("--timing", action="store_true", help="record wall-clock times (outputs no longer reproducible)")
    return parser


def _error(kind, code, exc):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(exc)}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        func(Run(args))
    except ConfigError as exc:
        return _error(type(exc).__name__, EXIT_CONFIG, exc)
    except NumericalError as exc:
        return _error(type(exc).__name__, EXIT_NUMERIC, exc)
    except OSError as exc:
        return _error(type(exc).__name__, EXIT_IO, exc)
    except (ValueError, TypeError, KeyError) as exc:
        # malformed values that slipped past the schema (wrong shapes, wrong types)
        return _error(type(exc).__name__, EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
