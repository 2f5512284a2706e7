"""Linear resolvent solves (m I - L) u = g and the nonlinear p-Laplace problem.

Sign convention: the canonical linear system is (m I - L) u = g. A source f of
the form (L - m) u = f corresponds to g = -f.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConfigError, ConvergenceError, NumericalError


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    residual: float
    wall_ms: float
    method: str
    objective: Optional[float] = None
    objective_trace: list = field(default_factory=list, repr=False)
    #: J(u_{k+1}) - J(u_k), evaluated without cancellation (all < 0)
    decrements: list = field(default_factory=list, repr=False)
    residual_trace: list = field(default_factory=list, repr=False)

    def summary(self):
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "wall_ms": self.wall_ms,
            "method": self.method,
            "objective": self.objective,
        }


def _rel_residual(op, m, u, g, gnorm):
    r = g - (m * u - op.apply(u))
    return float(np.linalg.norm(r)) / gnorm, r


def _weighted_cg(op, m, g, tol, max_iter, x0):
    """Jacobi-preconditioned CG in the nu-weighted inner product."""
    nu = op.nu
    diag = op.row_mass + op.kappa + m
    gnorm = float(np.linalg.norm(g))
    u = np.zeros_like(g) if x0 is None else x0.copy()
    r = g - (m * u - op.apply(u))
    z = r / diag
    p = z.copy()
    rz = float(np.sum(nu * r * z))
    trace = [float(np.linalg.norm(r)) / gnorm]
    for it in range(1, max_iter + 1):
        if trace[-1] <= tol:
            return u, it - 1, trace
        Ap = m * p - op.apply(p)
        step = rz / float(np.sum(nu * p * Ap))
        u += step * p
        r -= step * Ap
        trace.append(float(np.linalg.norm(r)) / gnorm)
        z = r / diag
        rz_new = float(np.sum(nu * r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    if trace[-1] <= tol:
        return u, max_iter, trace
    raise ConvergenceError(f"weighted CG reached {max_iter} iterations at residual {trace[-1]:.3e}",
                           residual=trace[-1], trace=trace)


def _gmres(op, m, g, tol, max_iter, x0):
    n = op.n
    diag = op.row_mass + op.kappa + m
    A = spla.LinearOperator((n, n), matvec=lambda v: m * v - op.apply(v), dtype=float)
    P = spla.LinearOperator((n, n), matvec=lambda v: v / diag, dtype=float)
    trace = []
    gnorm = float(np.linalg.norm(g))
    u = np.zeros_like(g) if x0 is None else x0.copy()
    restart = min(n, 60)
    iters = 0
    # outer loop so the true (unpreconditioned) residual decides termination
    while iters < max_iter:
        u, _info = spla.gmres(A, g, x0=u, rtol=0.1 * tol, atol=0.0, restart=restart,
                              maxiter=1, M=P, callback=lambda _: None, callback_type="pr_norm")
        iters += restart
        res, _ = _rel_residual(op, m, u, g, gnorm)
        trace.append(res)
        if res <= tol:
            return u, iters, trace
        if len(trace) > 3 and trace[-1] >= 0.999 * trace[-2]:
            break
    raise ConvergenceError(f"GMRES stalled at residual {trace[-1]:.3e}", residual=trace[-1], trace=trace)


def _richardson(op, m, g, tol, max_iter, x0, omega=1.0):
    """Damped Jacobi iteration; converges since m I - L is strictly diagonally dominant."""
    diag = op.row_mass + op.kappa + m
    gnorm = float(np.linalg.norm(g))
    u = np.zeros_like(g) if x0 is None else x0.copy()
    trace = []
    for it in range(max_iter + 1):
        res, r = _rel_residual(op, m, u, g, gnorm)
        trace.append(res)
        if res <= tol:
            return u, it, trace
        u = u + omega * r / diag
    raise ConvergenceError(f"Richardson reached {max_iter} iterations at residual {trace[-1]:.3e}",
                           residual=trace[-1], trace=trace)


def solve_resolvent(op, m, g, tol=1e-8, method="auto", max_iter=10_000, x0=None):
    """Solve (m I - L) u = g to ||(m I - L) u - g||_2 <= tol ||g||_2.

    ``method``: ``auto`` (weighted CG when a symmetrizing weight exists, GMRES
    otherwise), ``cg``, ``gmres``, ``richardson`` or ``dense`` (direct factorization).
    """
    if not m > 0:
        raise ConfigError(f"m must be positive, got {m}")
    g = np.asarray(g, dtype=float)
    if g.shape != (op.n,):
        raise ConfigError(f"right-hand side has shape {g.shape}, expected ({op.n},)")
    t0 = time.perf_counter()
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return SolveResult(np.zeros(op.n), 0, 0.0, 0.0, method)
    if method == "auto":
        method = "cg" if op.nu is not None else "gmres"
    if method == "cg":
        if op.nu is None:
            raise ConfigError("CG needs a symmetrizing weight; use gmres for non-symmetric kernels")
        u, it, trace = _weighted_cg(op, m, g, tol, max_iter, x0)
    elif method == "gmres":
        u, it, trace = _gmres(op, m, g, tol, max_iter, x0)
    elif method == "richardson":
        u, it, trace = _richardson(op, m, g, tol, max_iter, x0)
    elif method == "dense":
        u = np.linalg.solve(op.shifted_matrix(m), g)
        it = 1
        trace = []
    else:
        raise ConfigError(f"unknown linear method {method!r}")
    res, _ = _rel_residual(op, m, u, g, gnorm)
    if method != "dense" and res > tol:
        raise ConvergenceError(f"{method} finished above tolerance ({res:.3e})", residual=res, trace=trace)
    return SolveResult(u, it, res, 1e3 * (time.perf_counter() - t0), method, residual_trace=trace)


# ---------------------------------------------------------------------------
# nonlinear problem
# ---------------------------------------------------------------------------

def _phi(t, p):
    if p == 2.0:
        return t
    a = np.abs(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a > 0, a ** (p - 2.0) * t, 0.0)


def _weight(op):
    if op.nu is None:
        raise ConfigError("the p-Laplace functional needs a symmetrizing weight")
    return op.nu


def _pair_sum(A, u, p, chunk=512):
    total = 0.0
    for s in range(0, len(u), chunk):
        total += float(np.sum(A[s:s + chunk] * np.abs(u[None, :] - u[s:s + chunk, None]) ** p))
    return total


def plaplace_apply(op, p, u, chunk=512):
    """(L_p u)_i = sum_j W_ij phi(u_j - u_i) - kappa_i phi(u_i), phi(t) = |t|^{p-2} t."""
    out = np.empty_like(u)
    for s in range(0, len(u), chunk):
        out[s:s + chunk] = np.sum(op.W[s:s + chunk] * _phi(u[None, :] - u[s:s + chunk, None], p), axis=1)
    return out - op.kappa * _phi(u, p)


def plaplace_residual(op, p, m, f, u):
    """Euler-Lagrange mismatch -L_p u + m phi(u) + f (zero iff L_p u - m phi(u) = f)."""
    return -plaplace_apply(op, p, u) + m * _phi(u, p) + f


def _power_delta(a, b, p):
    """|a + b|^p - |a|^p without cancellation when |b| << |a|."""
    small = np.abs(b) < 0.5 * np.abs(a)
    safe_a = np.where(small, a, 1.0)
    stable = np.abs(safe_a) ** p * np.expm1(p * np.log1p(np.where(small, b, 0.0) / safe_a))
    return np.where(small, stable, np.abs(a + b) ** p - np.abs(a) ** p)


def objective_delta(op, p, m, f, u, s, chunk=512):
    """J(u + s) - J(u), summed term by term so that tiny decreases stay resolvable."""
    nu = _weight(op)
    total = 0.0
    for i in range(0, len(u), chunk):
        du = u[None, :] - u[i:i + chunk, None]
        ds = s[None, :] - s[i:i + chunk, None]
        total += float(np.sum(nu[i:i + chunk, None] * op.W[i:i + chunk] * _power_delta(du, ds, p))) / (2 * p)
    pu = _power_delta(u, s, p)
    total += float(np.sum(nu * op.kappa * pu)) / p + m / p * float(np.sum(nu * pu))
    total += float(np.sum(nu * f * s))
    return op.grid.cell_volume * total


def objective_j(op, p, m, f, u):
    """h^d [ 1/(2p) sum nu_i W_ij |u_j-u_i|^p + 1/p sum nu kappa |u|^p + m/p sum nu |u|^p + sum nu f u ]."""
    if not p > 1:
        raise ConfigError(f"p must exceed 1, got {p}")
    nu = _weight(op)
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    A = nu[:, None] * op.W
    au = np.abs(u) ** p
    val = _pair_sum(A, u, p) / (2 * p) + float(np.sum(nu * op.kappa * au)) / p
    val += m / p * float(np.sum(nu * au)) + float(np.sum(nu * f * u))
    return op.grid.cell_volume * val


def solve_plaplace(op, p, m, f, tol=1e-6, max_iter=100_000, memory=10, u0=None):
    """Minimise objective_j by L-BFGS with Armijo backtracking.

    Terminates when ||-L_p u + m phi(u) + f||_2 <= tol ||f||_2.
    """
    if not p > 1:
        raise ConfigError(f"p must exceed 1, got {p}")
    if not m > 0:
        raise ConfigError(f"m must be positive, got {m}")
    f = np.asarray(f, dtype=float)
    if f.shape != (op.n,):
        raise ConfigError(f"right-hand side has shape {f.shape}, expected ({op.n},)")
    nu = _weight(op)
    hd = op.grid.cell_volume
    t0 = time.perf_counter()
    fnorm = float(np.linalg.norm(f))
    u = np.zeros(op.n) if u0 is None else np.array(u0, dtype=float)
    J = objective_j(op, p, m, f, u)
    r = plaplace_residual(op, p, m, f, u)
    grad = hd * nu * r
    S, Y = [], []
    jtrace = [J]
    dtrace = []
    rtrace = [float(np.linalg.norm(r)) / fnorm if fnorm > 0 else 0.0]
    for it in range(max_iter + 1):
        if float(np.linalg.norm(r)) <= tol * fnorm:
            return SolveResult(u, it, rtrace[-1], 1e3 * (time.perf_counter() - t0), "lbfgs", J, jtrace, dtrace, rtrace)
        if it == max_iter:
            break
        # two-loop recursion
        q = grad.copy()
        coef = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = float(s @ q) / float(y @ s)
            coef.append(a)
            q -= a * y
        if S:
            q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
        else:
            q *= 1e-2 / float(np.max(np.abs(q)))
        for (s, y), a in zip(zip(S, Y), reversed(coef)):
            b = float(y @ q) / float(y @ s)
            q += (a - b) * s
        d = -q
        gd = float(grad @ d)
        if not gd < 0:
            S.clear()
            Y.clear()
            d = -grad * (1e-2 / float(np.max(np.abs(grad))))
            gd = float(grad @ d)
        t = 1.0
        for _ in range(80):
            dJ = objective_delta(op, p, m, f, u, t * d)
            if dJ <= 1e-4 * t * gd and dJ < 0:
                break
            t *= 0.5
        else:
            raise NumericalError(f"line search failed at iteration {it} (objective {J:.6e}, residual {rtrace[-1]:.3e})")
        un = u + t * d
        rn = plaplace_residual(op, p, m, f, un)
        gn = hd * nu * rn
        s, y = un - u, gn - grad
        if float(s @ y) > 1e-300:
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        u, r, grad, J = un, rn, gn, J + dJ
        jtrace.append(J)
        dtrace.append(dJ)
        rtrace.append(float(np.linalg.norm(r)) / fnorm)
    raise ConvergenceError(f"p-Laplace descent reached {max_iter} steps at residual {rtrace[-1]:.3e}",
                           residual=rtrace[-1], trace=rtrace)
