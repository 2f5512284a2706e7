"""Homogenization sweeps: eps-problems against the effective problem on one shared grid."""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy

from .effective import build_cell_operator, effective_model, principal_eigenfunction
from .errors import ConfigError, NumericalError
from .fields import cell_average, cell_average_ratio
from .kernels import (
    ConstantKernel,
    NonSymKernel,
    P1Kernel,
    Q1Kernel,
    Q2Kernel,
)
from .operator import _exterior_kappa_1d, assemble, build_grid, energy_form, fractional_seminorm
from .solvers import solve_plaplace, solve_resolvent

CSV_COLUMNS = ["eps", "seed", "rel_l2_error", "gamma_value", "seminorm", "iters", "residual", "wall_ms"]


def bump(radius=1.0, center=0.0):
    """Smooth compactly supported source exp(-1 / (1 - |x - c|^2 / r^2))."""

    def f(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - center) ** 2, axis=-1) / radius**2
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(r2 < 1, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)

    return f


@dataclass
class SweepConfig:
    model: object
    eps: Sequence[float]
    source: Callable = field(default_factory=bump)
    m: float = 1.0
    p: float = 2.0
    R_dom: float = 2.0
    K: int = 8
    r_near: Optional[float] = None
    seeds: Sequence[int] = (0,)
    tol: float = 1e-8
    nl_tol: float = 1e-6
    method: str = "auto"
    naive: bool = False
    cell_N: Optional[int] = None
    threads: int = 1
    timing: bool = False
    echo: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = [float(e) for e in self.eps]
        if not eps:
            raise ConfigError("eps list is empty")
        if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError(f"eps list must be positive and strictly decreasing, got {eps}")
        if self.K < 8:
            raise ConfigError(f"h = eps_min / K needs K >= 8, got {self.K}")
        if not self.m > 0 or not self.p > 1:
            raise ConfigError("need m > 0 and p > 1")
        if not self.model.random:
            self.seeds = (0,) if not self.seeds else tuple(self.seeds)[:1]
        self.eps = eps
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def h(self):
        return self.eps[-1] / self.K


@dataclass
class SweepRecord:
    eps: float
    seed: int
    rel_error: float
    gamma_value: float
    seminorm: float
    iters: int
    residual: float
    wall_ms: float
    gamma_at_u0: float = float("nan")
    naive_error: float = float("nan")
    norm_u: float = float("nan")
    norm_f: float = float("nan")
    resolvent_bound_ok: Optional[bool] = None
    energy: Optional[dict] = None

    def csv_row(self):
        return [self.eps, self.seed, self.rel_error, self.gamma_value, self.seminorm, self.iters,
                self.residual, self.wall_ms]


@dataclass
class SweepReport:
    records: list
    lambda_eff: float
    gamma_eff: float
    rates: dict
    metadata: dict
    effective_info: dict = field(default_factory=dict)
    naive_lambda: Optional[float] = None
    cv_by_eps: dict = field(default_factory=dict)

    def errors(self, seed=None):
        rs = [r for r in self.records if seed is None or r.seed == seed]
        return [r.rel_error for r in rs]

    def by_seed(self):
        out = {}
        for r in self.records:
            out.setdefault(r.seed, []).append(r)
        return out


# ---------------------------------------------------------------------------
# Gamma functionals and energy identity
# ---------------------------------------------------------------------------

def gamma_functional(op, m, g, u, nu=None):
    """h^d [ sum nu (-L u) u + m sum nu u^2 - 2 sum nu g u ] (quadratic form plus lower-order terms)."""
    nu = op.nu if nu is None else nu
    if nu is None:
        return float("nan")
    hd = op.grid.cell_volume
    return energy_form(op, u, u, nu=nu) + hd * float(np.sum(nu * (m * u * u - 2.0 * g * u)))


def _effective_weight_mean(model, eff_value):
    """Mean symmetrizing weight paired with the effective form."""
    if isinstance(model, P1Kernel):
        return cell_average_ratio(model.mu, model.lam)
    if isinstance(model, Q1Kernel):
        e_mu = model.mu.mean()
        return e_mu**2 / eff_value
    if model.symmetric:
        return 1.0
    return None


def gamma_effective(op_eff, m, g, u, nu_bar):
    """F^eff(u) = nu_bar h^d [ <(m - L_eff) u, u> - 2 <g, u> ]; the effective form scaled by the mean weight."""
    if nu_bar is None:
        return float("nan")
    ones = np.ones(op_eff.n)
    return nu_bar * gamma_functional(op_eff, m, g, u, nu=ones)


class _IncomingWeighted:
    """Kernel (x, y) -> p0(y/eps) Lambda(y, x): mass flowing into x from weighted exterior cells."""

    def __init__(self, model, p0):
        self.model, self.p0 = model, p0
        self.alpha, self.d = model.alpha, model.d

    def pair_matrix(self, eps, xs, ys, seed=None):
        ys = np.asarray(ys, dtype=float)
        return self.p0(ys / eps)[None, :] * self.model.pair_matrix(eps, ys, xs, seed).T

    def y_period(self, eps):
        return eps

    def exterior_mean(self, eps, x, yref, seed=None):
        raise ConfigError("incoming exterior mass needs a periodic kernel on a period-aligned grid")


def energy_identity(model, eps, op, u, f, m, p0):
    """Weighted energy identity for non-symmetric kernels on the lattice extension of the grid.

    lhs = 1/2 sum p0_i W_ij (u_j - u_i)^2 (including pairs with one point outside)
          + m sum p0 u^2;  rhs = -sum p0 u f.
    ``zeroint`` = -1/2 sum u_j^2 (L* p0)_j is the term that vanishes when L* p0 = 0.
    """
    grid = op.grid
    if grid.d != 1:
        raise ConfigError("energy identity is implemented for d = 1")
    x = grid.centers()
    pv = p0(x / eps)
    kin = _exterior_kappa_1d(_IncomingWeighted(model, p0), eps, grid, None, op.meta["n_near"], grid.M)
    hd = grid.cell_volume
    inner = 0.0
    for s in range(0, grid.n, 512):
        du = u[None, :] - u[s:s + 512, None]
        inner += float(np.sum(pv[s:s + 512, None] * op.W[s:s + 512] * du * du))
    ext = float(np.sum(u * u * (pv * op.kappa + kin)))
    lhs = hd * (0.5 * inner + 0.5 * ext + m * float(np.sum(pv * u * u)))
    rhs = -hd * float(np.sum(pv * u * f))
    adj = pv @ op.W + kin - pv * (op.row_mass + op.kappa)
    zeroint = -0.5 * hd * float(np.sum(u * u * adj))
    return {
        "lhs": lhs,
        "rhs": rhs,
        "zeroint": zeroint,
        "rel_defect": abs(lhs - rhs) / abs(rhs) if rhs != 0 else float("nan"),
        "adjoint_residual": float(np.max(np.abs(adj))),
    }


# ---------------------------------------------------------------------------
# sweep driver
# ---------------------------------------------------------------------------

def _naive_lambda(model):
    if isinstance(model, P1Kernel):
        return cell_average(model.lam) * cell_average(model.mu)
    if isinstance(model, Q1Kernel):
        return model.lam.mean() * model.mu.mean()
    if isinstance(model, NonSymKernel):
        return float(np.mean(model.table.samples))
    raise ConfigError(f"no naive average is defined for {model.case} kernels")


def _rel_err(u, u0, p):
    num = np.sum(np.abs(u - u0) ** p) ** (1.0 / p)
    den = np.sum(np.abs(u0) ** p) ** (1.0 / p)
    return float(num / den)


def _solve(op, cfg, f):
    if cfg.p == 2.0:
        return solve_resolvent(op, cfg.m, -f, tol=cfg.tol, method=cfg.method)
    return solve_plaplace(op, cfg.p, cfg.m, f, tol=cfg.nl_tol)


def _environment():
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def run_sweep(cfg):
    """Solve the effective problem once and every (eps, seed) problem on the same grid."""
    model = cfg.model
    if cfg.p != 2.0 and isinstance(model, NonSymKernel):
        raise ConfigError("nonlinear sweeps need a symmetrizable kernel")
    grid = build_grid(model.d, cfg.R_dom, cfg.h)
    x = grid.centers()
    f = np.asarray(cfg.source(x), dtype=float).reshape(grid.n)
    g = -f
    eff = effective_model(model, cell_N=cfg.cell_N or (256 if model.d == 1 else 32))
    op_eff = assemble(eff.model, 1.0, grid, r_near=cfg.r_near)
    u0 = _solve(op_eff, cfg, f).u
    nu_bar = _effective_weight_mean(model, eff.value)
    gamma_eff = gamma_effective(op_eff, cfg.m, g, u0, nu_bar) if cfg.p == 2.0 else float("nan")
    naive_lambda = None
    u_naive = None
    if cfg.naive:
        naive_lambda = _naive_lambda(model)
        op_n = assemble(ConstantKernel(naive_lambda, model.alpha, model.gamma, model.d), 1.0, grid, r_near=cfg.r_near)
        u_naive = _solve(op_n, cfg, f).u
    fnorm = float(np.linalg.norm(f))

    def task(eps, seed):
        t0 = time.perf_counter()
        try:
            op = assemble(model, eps, grid, r_near=cfg.r_near, seed=seed if model.random else None)
            res = _solve(op, cfg, f)
        except NumericalError as exc:
            raise type(exc)(f"eps={eps}, seed={seed}: {exc}") from exc
        u = res.u
        rec = SweepRecord(
            eps=eps, seed=seed, rel_error=_rel_err(u, u0, cfg.p),
            gamma_value=gamma_functional(op, cfg.m, g, u) if cfg.p == 2.0 else float("nan"),
            seminorm=fractional_seminorm(grid, u, model.alpha, p=cfg.p, r_near=cfg.r_near),
            iters=res.iterations, residual=res.residual,
            wall_ms=round(1e3 * (time.perf_counter() - t0), 3) if cfg.timing else 0.0,
        )
        if cfg.p == 2.0:
            rec.gamma_at_u0 = gamma_functional(op, cfg.m, g, u0)
            rec.norm_u = float(np.linalg.norm(u))
            rec.norm_f = fnorm
            rec.resolvent_bound_ok = rec.norm_u <= model.gamma**2 / cfg.m * fnorm
        if u_naive is not None:
            rec.naive_error = _rel_err(u, u_naive, cfg.p)
        if isinstance(model, NonSymKernel) and model.d == 1:
            Kc = eps / grid.h
            if abs(Kc - round(Kc)) < 1e-9 and abs(cfg.R_dom / eps - round(cfg.R_dom / eps)) < 1e-9:
                disc = build_cell_operator(model.table, model.alpha, model.gamma, N=int(round(Kc)),
                                           n_near=op.meta["n_near"])
                sol = principal_eigenfunction(disc)
                rec.energy = energy_identity(model, eps, op, u, f, cfg.m, sol.p0)
                rec.energy["cell_residual"] = sol.residual
        return rec

    jobs = [(e, s) for s in cfg.seeds for e in cfg.eps]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            records = list(pool.map(lambda js: task(*js), jobs))
    else:
        records = [task(*js) for js in jobs]

    rates = {}
    for seed in cfg.seeds:
        errs = [r.rel_error for r in records if r.seed == seed]
        if len(errs) >= 3 and all(e > 0 for e in errs):
            rates[seed] = estimate_rate(errs, cfg.eps)
    cv = {}
    if len(cfg.seeds) > 1:
        for e in cfg.eps:
            errs = np.array([r.rel_error for r in records if r.eps == e])
            cv[e] = float(np.std(errs) / np.mean(errs)) if np.mean(errs) > 0 else 0.0
    info = {k: v for k, v in eff.info.items() if k != "solution"}
    return SweepReport(records, eff.value, gamma_eff, rates, _environment(), info, naive_lambda, cv)


def gamma_values(cfg):
    """Minimum values F^eps(u^eps) along the sweep and F^eff(u0) (P1 kernels)."""
    if not isinstance(cfg.model, P1Kernel):
        raise ConfigError(f"gamma values are defined for p1 kernels, got {cfg.model.case}")
    if cfg.p != 2.0:
        raise ConfigError("gamma values use the quadratic functional (p = 2)")
    rep = run_sweep(cfg)
    return {
        "eps": [r.eps for r in rep.records],
        "F_eps": [r.gamma_value for r in rep.records],
        "F_eps_at_u0": [r.gamma_at_u0 for r in rep.records],
        "F_eff": rep.gamma_eff,
        "lambda_eff": rep.lambda_eff,
        "report": rep,
    }


def estimate_rate(errors, eps):
    """Least-squares slope of log(error) against log(eps)."""
    errors = np.asarray(errors, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if errors.shape != eps.shape or errors.size < 3:
        raise ConfigError("rate estimation needs at least 3 (eps, error) pairs")
    if np.any(errors <= 0) or np.any(eps <= 0):
        raise ConfigError("errors and eps must be positive")
    return float(np.polyfit(np.log(eps), np.log(errors), 1)[0])


# ---------------------------------------------------------------------------
# ergodic averages
# ---------------------------------------------------------------------------

def _box_points(lo, hi, spacing):
    axes = []
    for a, b in zip(lo, hi):
        n = max(1, int(math.ceil((b - a) / spacing)))
        axes.append(a + (np.arange(n) + 0.5) * (b - a) / n)
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([c.ravel() for c in g], axis=-1)


def ergodic_limit(model):
    """Weak limit of Lambda^eps over boxes: E lam E mu for q1, the double Haar mean for q2."""
    if isinstance(model, Q1Kernel):
        return model.lam.mean() * model.mu.mean()
    if isinstance(model, Q2Kernel):
        return model.omega_mean()
    if isinstance(model, ConstantKernel):
        return model.c
    raise ConfigError(f"ergodic check applies to q1/q2 kernels, got {model.case}")


def ergodic_average_check(model, box, eps_list, seeds, points_per_period=8):
    """Mean |avg_Q Lambda^eps(x, y) - limit| over seeds, per eps.

    ``box`` is (x_lo, x_hi, y_lo, y_hi) with each entry a length-d sequence (or a
    scalar in d = 1). The average uses a midpoint grid of spacing eps / points_per_period.
    """
    if len(seeds) < 10:
        raise ConfigError("ergodic check needs at least 10 seeds")
    d = model.d
    xlo, xhi, ylo, yhi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
    if any(v.shape != (d,) for v in (xlo, xhi, ylo, yhi)):
        raise ConfigError("box bounds must have d components")
    limit = ergodic_limit(model)
    macro = getattr(model, "macro", None)
    out = {"eps": [], "mean_deviation": [], "deviations": [], "limit": limit}
    for eps in eps_list:
        xs = _box_points(xlo, xhi, eps / points_per_period)
        ys = _box_points(ylo, yhi, eps / points_per_period)
        target = limit
        if macro is not None and not macro.is_constant:
            target = limit * float(np.mean(macro(xs[:, None, :], ys[None, :, :])))
        devs = []
        for seed in seeds:
            vals = model.pair_matrix(eps, xs, ys, seed if getattr(model, "random", False) else None)
            devs.append(abs(float(np.mean(vals - target))))
        out["eps"].append(float(eps))
        out["deviations"].append(devs)
        out["mean_deviation"].append(float(np.mean(devs)))
    return out


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.records:
        w.writerow([_fmt(v) for v in r.csv_row()])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def sweep_json(report, echo=None):
    doc = {
        "config": echo or {},
        "lambda_eff": report.lambda_eff,
        "naive_lambda": report.naive_lambda,
        "gamma_eff": report.gamma_eff,
        "rates": report.rates,
        "cv_by_eps": report.cv_by_eps,
        "effective": report.effective_info,
        "environment": report.metadata,
        "records": [dict(r.__dict__) for r in report.records],
    }
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def write_report(report, out_dir, echo=None, stem="sweep"):
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(sweep_csv(report))
    (out / f"{stem}.json").write_text(sweep_json(report, echo))
    return out / f"{stem}.csv", out / f"{stem}.json"
