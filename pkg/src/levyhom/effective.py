"""Effective (homogenized) kernels for every regime, including the torus cell problem.

The non-symmetric regime needs the principal eigenfunction p0 of the adjoint
cell operator L*; it is computed by power iteration on (lambda_shift I - L*)^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import zeta

from .errors import ConfigError, ConvergenceError, PositivityError
from .fields import CHECKERBOARD, TorusField, cell_average, cell_average_ratio
from .kernels import (
    ConstantKernel,
    MacroKernel,
    NonSymKernel,
    P1Kernel,
    P2Kernel,
    PairTable,
    Q1Kernel,
    Q2Kernel,
)
from .operator import complement_tail_2d, default_near_cells, offset_weights


# ---------------------------------------------------------------------------
# closed-form regimes
# ---------------------------------------------------------------------------

def effective_p1(lam, mu):
    """(mean mu/lam)^{-1} (mean mu)^2 for periodic product kernels."""
    return cell_average(mu) ** 2 / cell_average_ratio(mu, lam)


def effective_p2(model, x=None, y=None):
    """a(x, y) times the mean of the periodic table (constant factor when x, y omitted)."""
    if not model.symmetric:
        diff, cell = model.table.asymmetry()
        raise ConfigError(f"p2 table is not symmetric (|difference| {diff:.3g} at cell {cell})")
    mean = float(np.mean(model.table.samples))
    if x is None:
        return mean
    v = model.macro(np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float))) * mean
    return float(v) if np.ndim(v) == 0 else v


def effective_q2(model, x=None, y=None):
    """a(x, y) times the double Haar mean of the Omega-part of the kernel."""
    mean = model.omega_mean()
    if x is None:
        return mean
    v = model.macro(np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float))) * mean
    return float(v) if np.ndim(v) == 0 else v


def _quantile_pieces(spec):
    """Breakpoints of the cumulative weights and the state on each piece of [0, 1)."""
    return np.concatenate([[0.0], np.cumsum(spec.weights)]), np.asarray(spec.states)


def _coupled(lam, mu):
    """True when both specs draw from the same stream with the same lattice."""
    return (
        lam.seed == mu.seed
        and lam.kind == mu.kind == CHECKERBOARD
        and lam.cell_size == mu.cell_size
    )


def effective_q1(lam, mu, n_mc=4000, seed=0, return_stderr=False):
    """(E mu / lam)^{-1} (E mu)^2 for random product kernels.

    Finite-state checkerboards are handled exactly: independent streams factorise,
    coupled streams (equal seeds) are comonotone and integrate over the quantile
    pieces. Other laws fall back to seeded Monte-Carlo; ``return_stderr`` then
    also returns a delta-method standard error (zero for exact results).
    """
    if lam.finite_state and mu.finite_state:
        if _coupled(lam, mu):
            bl, sl = _quantile_pieces(lam)
            bm, sm = _quantile_pieces(mu)
            cuts = np.union1d(bl, bm)
            mid = 0.5 * (cuts[:-1] + cuts[1:])
            width = np.diff(cuts)
            vl = sl[np.minimum(np.searchsorted(bl, mid, side="right") - 1, len(sl) - 1)]
            vm = sm[np.minimum(np.searchsorted(bm, mid, side="right") - 1, len(sm) - 1)]
            e_mu = float(np.dot(width, vm))
            e_ratio = float(np.dot(width, vm / vl))
        elif lam.seed == mu.seed:
            raise ConfigError("equal seeds with different lattices do not define a coupling")
        else:
            e_mu = float(np.dot(mu.weights, mu.states))
            e_ratio = e_mu * float(np.dot(lam.weights, 1.0 / np.asarray(lam.states)))
        value = e_mu**2 / e_ratio
        return (value, 0.0) if return_stderr else value
    # Monte-Carlo over independent realizations, one draw per realization
    rng_seeds = seed * 1_000_003
    la = np.empty(n_mc)
    mv = np.empty(n_mc)
    pt = np.zeros((1, lam.d))
    for r in range(n_mc):
        la[r] = lam.evaluate(pt, run_seed=rng_seeds + r)[0]
        mv[r] = mu.evaluate(pt, run_seed=rng_seeds + r)[0]
    ratio = mv / la
    e_mu, e_ratio = mv.mean(), ratio.mean()
    value = e_mu**2 / e_ratio
    # delta method for g(a, b) = a^2 / b
    grad = np.array([2 * e_mu / e_ratio, -(e_mu**2) / e_ratio**2])
    cov = np.cov(np.vstack([mv, ratio])) / n_mc
    stderr = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    return (value, stderr) if return_stderr else value


# ---------------------------------------------------------------------------
# torus cell operator
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CellOperatorDiscretization:
    """Discrete L and L* on the torus of N^d cells.

    ``T`` holds the symmetric lattice weights (periodised singular factor);
    ``K = Lambda * T`` is the kernel-weighted matrix: (L v)_i = sum_j K_ij (v_j - v_i)
    and (L* q)_i = sum_j (K_ji q_j - K_ij q_i).
    """

    N: int
    d: int
    alpha: float
    gamma: float
    table: PairTable
    R_img: int
    n_near: int
    T: np.ndarray
    lambda_shift: float
    tail_bound: float = 0.0

    def __post_init__(self):
        lam = self.table.samples.reshape(self.N**self.d, self.N**self.d)
        self.K = lam * self.T
        self.row_mass = self.K.sum(axis=1)

    @property
    def n(self):
        return self.N**self.d

    def adjoint_matrix(self):
        A = self.K.T.copy()
        A[np.diag_indices_from(A)] -= self.row_mass
        return A


def _torus_weights_1d(N, alpha, n_near):
    """Exact lattice sums sum_n w(|r + n N|) via the Hurwitz zeta function."""
    a = float(alpha)
    r = np.arange(N, dtype=float)
    far = np.empty(N)
    far[0] = 2.0 * zeta(1.0 + a, 1.0)
    far[1:] = zeta(1.0 + a, r[1:] / N) + zeta(1.0 + a, 1.0 - r[1:] / N)
    far *= N ** (-1.0 - a)
    w = offset_weights(1, a, n_near, n_near)
    for k in range(1, n_near + 1):
        corr = w[k] - k ** (-1.0 - a)
        far[k % N] += corr
        far[(-k) % N] += corr
    off = np.abs(np.arange(N)[:, None] - np.arange(N)[None, :])
    return N**a * far[off], 0.0


def _torus_weights_2d(N, alpha, n_near, R_img):
    a = float(alpha)
    span = (2 * R_img + 1) * N
    w = offset_weights(2, a, n_near, span)
    img = np.arange(-R_img, R_img + 1) * N
    per = np.zeros((N, N))
    for i in range(N):
        k1 = np.abs(i + img)
        for j in range(N):
            k2 = np.abs(j + img)
            per[i, j] = w[k1[:, None], k2[None, :]].sum()
    half = (R_img + 0.5) * N
    tail = float(complement_tail_2d(np.zeros((1, 2)), -half, half, a)[0])
    per += tail / N**2
    idx = np.stack(np.meshgrid(np.arange(N), np.arange(N), indexing="ij"), axis=-1).reshape(-1, 2)
    d0 = (idx[None, :, 0] - idx[:, None, 0]) % N
    d1 = (idx[None, :, 1] - idx[:, None, 1]) % N
    return N**a * per[d0, d1], N**a * tail


def _retabulate(table, N):
    if table.N == N:
        return table
    c = (np.arange(N) + 0.5) / N
    grids = np.meshgrid(*([c] * (2 * table.d)), indexing="ij")
    xi = np.stack(grids[: table.d], axis=-1)
    eta = np.stack(grids[table.d:], axis=-1)
    return PairTable(table(xi, eta))


def build_cell_operator(table, alpha, gamma, N=None, R_img=8, n_near=None, shift_factor=4.0):
    """Assemble the torus cell operator for a periodic pair table.

    ``N`` defaults to the table resolution; a different N re-samples the table at
    cell centres. d=1 lattice sums are exact (``R_img`` unused); d=2 sums
    ``R_img`` image rings explicitly and spreads the continuum tail uniformly.
    """
    if not 0 < alpha < 2:
        raise ConfigError(f"alpha must lie in (0, 2), got {alpha}")
    N = table.N if N is None else int(N)
    if N < 1:
        raise ConfigError("N must be positive")
    d = table.d
    table = _retabulate(table, N)
    if n_near is None:
        n_near = default_near_cells(d, float(alpha))
    if d == 1:
        T, tail = _torus_weights_1d(N, alpha, n_near)
    else:
        T, tail = _torus_weights_2d(N, alpha, n_near, R_img)
    S = float(np.max(T.sum(axis=1)))
    return CellOperatorDiscretization(N, d, float(alpha), float(gamma), table, int(R_img), int(n_near), T,
                                      shift_factor * gamma * S, tail)


def _as_vector(disc, q):
    arr = q.samples if isinstance(q, TorusField) else np.asarray(q, dtype=float)
    if arr.size != disc.n:
        raise ConfigError(f"field has {arr.size} cells, cell operator has {disc.n}")
    return arr.reshape(disc.n)


def adjoint_apply(disc, q):
    """(L* q)_i = sum_j (K_ji q_j - K_ij q_i), summed per cell in index order."""
    v = _as_vector(disc, q)
    out = np.sum(disc.K.T * v[None, :] - disc.K * v[:, None], axis=1)
    return TorusField(out.reshape((disc.N,) * disc.d)) if isinstance(q, TorusField) else out


def forward_apply(disc, v):
    """(L v)_i = sum_j K_ij (v_j - v_i)."""
    x = _as_vector(disc, v)
    out = np.sum(disc.K * (x[None, :] - x[:, None]), axis=1)
    return TorusField(out.reshape((disc.N,) * disc.d)) if isinstance(v, TorusField) else out


@dataclass
class CellSolution:
    p0: TorusField
    eigenvalue: float
    residual: float
    pmin: float
    lambda_eff: float
    iterations: int
    lambda_shift: float
    tail_bound: float = 0.0
    trace: list = field(default_factory=list, repr=False)

    def as_dict(self):
        return {
            "eigenvalue": self.eigenvalue,
            "residual": self.residual,
            "pmin": self.pmin,
            "lambda_eff": self.lambda_eff,
            "iterations": self.iterations,
            "lambda_shift": self.lambda_shift,
            "tail_bound": self.tail_bound,
        }


def principal_eigenfunction(disc, tol=1e-12, max_iter=100_000, lambda_shift=None):
    """Power iteration on (lambda_shift I - L*)^{-1}; p0 normalised to mean 1.

    Stops when the sup-norm step d_k satisfies d_k < tol (1 - rho), rho being the
    observed contraction ratio, which bounds the distance to the limit by tol.
    """
    ls = disc.lambda_shift if lambda_shift is None else float(lambda_shift)
    if not ls > 0:
        raise ConfigError("lambda_shift must be positive")
    A = -disc.adjoint_matrix()
    A[np.diag_indices_from(A)] += ls
    lu = scipy.linalg.lu_factor(A)
    q = np.ones(disc.n)
    trace = []
    prev = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = scipy.linalg.lu_solve(lu, q)
        z /= z.mean()
        step = float(np.max(np.abs(z - q)))
        trace.append(step)
        q = z
        if step == 0.0:
            converged = True
            break
        if prev is not None and prev > 0:
            rho = min(step / prev, 0.999999)
            if step < tol * (1.0 - rho):
                converged = True
                break
        prev = step
    residual = float(np.max(np.abs(adjoint_apply(disc, q))))
    if not converged:
        raise ConvergenceError(
            f"power iteration did not converge in {max_iter} steps (last step {trace[-1]:.3e})",
            residual=residual, trace=trace,
        )
    if np.any(q <= 0):
        i = int(np.argmin(q))
        raise PositivityError(f"principal eigenfunction has nonpositive entry {q[i]:.3e} at cell {i}")
    eig = float(np.dot(q, scipy.linalg.lu_solve(lu, q)) / np.dot(q, q))
    p0 = TorusField(q.reshape((disc.N,) * disc.d))
    return CellSolution(p0, eig, residual, float(q.min()), effective_nonsym(disc.table, p0), it, ls,
                        disc.tail_bound, trace)


def effective_nonsym(table, p0):
    """<p0>^{-1} <Lambda p0> with <Lambda p0> the torus-squared mean of Lambda(xi, eta) p0(xi)."""
    if p0.N != table.N or p0.d != table.d:
        probe = TorusField(np.zeros((table.N,) * table.d))
        p0 = TorusField(p0(probe.centers()))
    return table.weighted_mean(p0) / cell_average(p0)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

@dataclass
class EffectiveResult:
    model: object
    value: float
    info: dict = field(default_factory=dict)


def effective_model(model, cell_N=None, tol=1e-12, R_img=8):
    """Homogenized kernel model of ``model`` together with the scalar coefficient."""
    a, g = model.alpha, model.gamma
    if isinstance(model, P1Kernel):
        v = effective_p1(model.lam, model.mu)
        return EffectiveResult(ConstantKernel(v, a, g, model.d), v, {"formula": "p1"})
    if isinstance(model, Q1Kernel):
        v, se = effective_q1(model.lam, model.mu, return_stderr=True)
        return EffectiveResult(ConstantKernel(v, a, g, model.d), v, {"formula": "q1", "stderr": se})
    if isinstance(model, P2Kernel):
        v = effective_p2(model)
        return EffectiveResult(MacroKernel(model.macro, v, a, g, model.d), v, {"formula": "p2"})
    if isinstance(model, Q2Kernel):
        v = effective_q2(model)
        return EffectiveResult(MacroKernel(model.macro, v, a, g, model.d), v, {"formula": "q2"})
    if isinstance(model, NonSymKernel):
        disc = build_cell_operator(model.table, a, g, N=cell_N, R_img=R_img)
        sol = principal_eigenfunction(disc, tol=tol)
        v = effective_nonsym(model.table, sol.p0)
        return EffectiveResult(ConstantKernel(v, a, g, model.d), v, {"formula": "nonsym", "cell": sol.as_dict(), "solution": sol})
    if isinstance(model, (ConstantKernel, MacroKernel)):
        return EffectiveResult(model, float(model.c), {"formula": "identity"})
    raise ConfigError(f"no effective kernel for {type(model).__name__}")
