"""Discretization of L u(x) = int (u(y) - u(x)) Lambda(x, y) |x - y|^{-d-alpha} dy.

Functions live on a uniform cell grid of the box [-R, R)^d and vanish outside.
Pair weights use exact cell-pair integrals of the singular factor for offsets
within ``r_near`` and midpoint values beyond; the exterior is folded into a
per-cell killing coefficient ``kappa``.

All weights are stored per unit cell volume, so that ``h^d * sum_i`` is the
discrete counterpart of an integral over the box.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gamma as gamma_fn, zeta

from .errors import ConfigError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform cells tiling [-R_dom, R_dom)^d; grid functions are flattened C-order."""

    d: int
    R_dom: float
    h: float
    M: int

    @property
    def n(self):
        return self.M**self.d

    @property
    def shape(self):
        return (self.M,) * self.d

    @property
    def cell_volume(self):
        return self.h**self.d

    def axis(self):
        return -self.R_dom + (np.arange(self.M) + 0.5) * self.h

    def centers(self):
        """Cell centres, shape (n, d)."""
        ax = self.axis()
        g = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([c.ravel() for c in g], axis=-1)

    def index(self):
        """Integer cell coordinates, shape (n, d)."""
        g = np.meshgrid(*([np.arange(self.M)] * self.d), indexing="ij")
        return np.stack([c.ravel() for c in g], axis=-1)

    def key(self):
        return (self.d, float(self.R_dom), float(self.h), self.M)


def build_grid(d, R_dom, h):
    if d not in (1, 2):
        raise ConfigError(f"d must be 1 or 2, got {d}")
    if not (h > 0 and R_dom > 0):
        raise ConfigError("h and R_dom must be positive")
    ratio = 2.0 * R_dom / h
    M = int(round(ratio))
    if abs(ratio - M) > 1e-9 * max(1.0, ratio) or M < 2:
        raise ConfigError(f"2*R_dom/h = {ratio!r} is not an integer >= 2")
    return Grid(d, float(R_dom), float(h), M)


# ---------------------------------------------------------------------------
# singular quadrature
# ---------------------------------------------------------------------------

def _second_antiderivative(s, alpha):
    """F with F'' = s^{-1-alpha} on s > 0, F(0) = 0 when alpha < 1."""
    s = np.asarray(s, dtype=float)
    if alpha == 1.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, -np.log(np.where(s > 0, s, 1.0)), np.inf)
    with np.errstate(divide="ignore"):
        return s ** (1.0 - alpha) / (alpha * (alpha - 1.0))


def _pair_integral_1d(k, alpha):
    """int_0^1 int_k^{k+1} |x - y|^{-1-alpha} dy dx for integer k >= 1 (unit cells)."""
    F = _second_antiderivative
    return float(F(k + 1.0, alpha) - 2.0 * F(float(k), alpha) + F(k - 1.0, alpha))


def _square_polar_integral(x0, y0, size, coeffs, alpha):
    """int over [x0, x0+size] x [y0, y0+size] of sum c_ab s1^a s2^b |s|^{-2-alpha} ds.

    Polar coordinates about the origin (which may be a corner of the square but
    never interior). The radial integral is done in closed form per monomial and
    the angular one by Gauss-Legendre between consecutive corner angles.
    """
    corners = np.array([[x0, y0], [x0 + size, y0], [x0, y0 + size], [x0 + size, y0 + size]])
    cx, cy = x0 + size / 2, y0 + size / 2
    theta_c = math.atan2(cy, cx)
    angles = []
    for px, py in corners:
        if px == 0 and py == 0:
            continue
        a = math.atan2(py, px) - theta_c
        a = (a + math.pi) % (2 * math.pi) - math.pi
        angles.append(a + theta_c)
    angles = sorted(set(angles))
    total = 0.0
    for a0, a1 in zip(angles[:-1], angles[1:]):
        if a1 - a0 < 1e-15:
            continue
        th = 0.5 * (a1 - a0) * _GL_NODES + 0.5 * (a1 + a0)
        wt = 0.5 * (a1 - a0) * _GL_WEIGHTS
        c, s = np.cos(th), np.sin(th)
        tin = np.zeros_like(th)
        tout = np.full_like(th, np.inf)
        for lo, dirc in ((x0, c), (y0, s)):
            hi = lo + size
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(dirc != 0, lo / np.where(dirc != 0, dirc, 1), -np.inf)
                t2 = np.where(dirc != 0, hi / np.where(dirc != 0, dirc, 1), np.inf)
            inside = (dirc != 0) | ((lo <= 0) & (0 <= hi))
            tmin = np.where(dirc != 0, np.minimum(t1, t2), -np.inf)
            tmax = np.where(dirc != 0, np.maximum(t1, t2), np.where(inside, np.inf, -np.inf))
            tin = np.maximum(tin, tmin)
            tout = np.minimum(tout, tmax)
        tout = np.maximum(tout, tin)
        val = np.zeros_like(th)
        for (a, b), coef in coeffs.items():
            if coef == 0:
                continue
            n = a + b
            e = n - alpha
            if e == 0:
                with np.errstate(divide="ignore"):
                    radial = np.log(tout) - np.log(tin)
            else:
                radial = (tout**e - tin**e) / e
            val += coef * c**a * s**b * radial
        total += float(np.dot(wt, val))
    return total


def _pair_integral_2d(k1, k2, alpha):
    """int_{cell 0} int_{cell k} |x - y|^{-2-alpha} dy dx for unit cells, k != 0."""
    total = 0.0
    for lo1 in (k1 - 1, k1):
        for lo2 in (k2 - 1, k2):
            # tent (1 - |s1 - k1|)(1 - |s2 - k2|) is bilinear on this square
            c1, sg1 = (1 - k1, 1.0) if lo1 == k1 - 1 else (1 + k1, -1.0)
            c2, sg2 = (1 - k2, 1.0) if lo2 == k2 - 1 else (1 + k2, -1.0)
            coeffs = {(0, 0): c1 * c2, (1, 0): sg1 * c2, (0, 1): c1 * sg2, (1, 1): sg1 * sg2}
            total += _square_polar_integral(float(lo1), float(lo2), 1.0, coeffs, alpha)
    return total


def _self_second_moment(d, alpha):
    """int over the unit cell centred at 0 of s_1^2 |s|^{-d-alpha} ds."""
    if d == 1:
        return 2.0 * 0.5 ** (2.0 - alpha) / (2.0 - alpha)
    total = 0.0
    for lo1 in (-0.5, 0.0):
        for lo2 in (-0.5, 0.0):
            total += _square_polar_integral(lo1, lo2, 0.5, {(2, 0): 1.0}, alpha)
    return total


def _cell_integral(k, alpha):
    """int over the unit cell centred at k of |s|^{-d-alpha} ds (collocation rule)."""
    if len(k) == 1:
        a = abs(k[0]) - 0.5
        b = a + 1.0
        return (a**-alpha - b**-alpha) / alpha
    return _square_polar_integral(k[0] - 0.5, k[1] - 0.5, 1.0, {(0, 0): 1.0}, alpha)


@functools.lru_cache(maxsize=None)
def _unit_near_weight(d, alpha, k):
    """Per-cell-volume weight for integer offset k (tuple) on the unit lattice."""
    k = tuple(abs(int(v)) for v in k)
    if alpha < 1.0:
        if d == 1:
            return _pair_integral_1d(k[0], alpha)
        return _pair_integral_2d(k[0], k[1], alpha)
    # cell-pair integrals diverge for touching cells when alpha >= 1: collocate at the
    # cell centre and move the self-cell second moment onto the axis neighbours
    w = _cell_integral(k, alpha)
    if sum(k) == 1:
        w += 0.5 * _self_second_moment(d, alpha)
    return w


def near_diagonal_weight(d, alpha, k, h):
    """Exact int_{cell 0} int_{cell k} |x - y|^{-d-alpha} dy dx for cells of side h.

    For alpha >= 1 touching cells make this integral infinite; the value returned
    then comes from the collocation rule (scaled by h^d) used by the assembler.
    """
    k = tuple(np.atleast_1d(np.asarray(k, dtype=int)).tolist())
    if len(k) != d:
        raise ConfigError(f"offset {k} does not have {d} components")
    if all(v == 0 for v in k):
        raise ConfigError("no self weight exists: same-cell differences vanish")
    if not 0 < alpha < 2:
        raise ConfigError(f"alpha must lie in (0, 2), got {alpha}")
    return h ** (2 * d) * h ** (-d - alpha) * _unit_near_weight(d, float(alpha), k)


def midpoint_weight(d, alpha, k, h):
    """h^d * h^d |k h|^{-d-alpha}: the midpoint value of the cell-pair integral."""
    r = math.sqrt(sum(float(v) ** 2 for v in np.atleast_1d(k)))
    return h ** (2 * d) * (r * h) ** (-d - alpha)


@functools.lru_cache(maxsize=None)
def default_near_cells(d, alpha):
    """Smallest offset n >= 4 (cells) at which exact and midpoint weights agree within 1%."""
    for n in range(4, 64):
        k = (n,) + (0,) * (d - 1)
        exact = _unit_near_weight(d, float(alpha), k)
        mid = float(n) ** (-d - alpha)
        if abs(exact - mid) <= 0.01 * mid:
            return n
    return 64


@functools.lru_cache(maxsize=64)
def _unit_offset_table(d, alpha, n_near, n_max):
    """Weights w[|k1|, ..., |kd|] for the unit lattice, exact inside the near ball."""
    k = np.arange(n_max + 1, dtype=float)
    if d == 1:
        w = np.zeros(n_max + 1)
        w[1:] = k[1:] ** (-1.0 - alpha)
        for j in range(1, min(n_near, n_max) + 1):
            w[j] = _unit_near_weight(1, alpha, (j,))
    else:
        r2 = k[:, None] ** 2 + k[None, :] ** 2
        with np.errstate(divide="ignore"):
            w = np.where(r2 > 0, r2 ** (-(2.0 + alpha) / 2.0), 0.0)
        for a in range(min(n_near, n_max) + 1):
            for b in range(a, min(n_near, n_max) + 1):
                if 0 < a * a + b * b <= n_near * n_near:
                    w[a, b] = w[b, a] = _unit_near_weight(2, alpha, (a, b))
    w.setflags(write=False)
    return w


def offset_weights(d, alpha, n_near, n_max, h=1.0):
    """Per-cell weights h^{-alpha} w(k) for 0 <= |k_a| <= n_max (zero at k = 0)."""
    return h ** (-alpha) * _unit_offset_table(d, float(alpha), int(n_near), int(n_max))


# ---------------------------------------------------------------------------
# exterior tails
# ---------------------------------------------------------------------------

def _halfplane_factor(alpha):
    return math.sqrt(math.pi) * gamma_fn((1.0 + alpha) / 2.0) / gamma_fn(1.0 + alpha / 2.0)


def _quadrant_tail(a, b, alpha):
    """int_{t>a, s>b} (t^2 + s^2)^{-1-alpha/2} for a, b > 0 (vectorised)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ts = np.arctan2(b, a)
    out = np.zeros(np.broadcast(a, b).shape)
    # theta in (0, ts): ray enters through s = b;  (ts, pi/2): through t = a
    for lo, hi, fn in ((0.0, ts, lambda th: (np.sin(th) / b[..., None]) ** alpha),
                       (ts, np.pi / 2, lambda th: (np.cos(th) / a[..., None]) ** alpha)):
        lo = np.broadcast_to(lo, out.shape)
        hi = np.broadcast_to(hi, out.shape)
        th = 0.5 * (hi - lo)[..., None] * _GL_NODES + 0.5 * (hi + lo)[..., None]
        out += 0.5 * (hi - lo) * np.sum(_GL_WEIGHTS * fn(th), axis=-1)
    return out / alpha


def complement_tail_2d(x, lo, hi, alpha):
    """int over R^2 minus the box [lo, hi]^2 of |x - y|^{-2-alpha} dy for interior x."""
    x = np.asarray(x, dtype=float)
    B = _halfplane_factor(alpha)
    dl = x - lo
    dr = hi - x
    total = B * np.sum(dl ** -alpha + dr ** -alpha, axis=-1) / alpha
    for da in (dl[..., 0], dr[..., 0]):
        for db in (dl[..., 1], dr[..., 1]):
            total -= _quadrant_tail(da, db, alpha)
    return total


def complement_tail_1d(x, lo, hi, alpha):
    x = np.asarray(x, dtype=float).reshape(-1)
    return ((x - lo) ** -alpha + (hi - x) ** -alpha) / alpha


# ---------------------------------------------------------------------------
# discrete operator
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DiscreteOperator:
    """(L u)_i = sum_j W_ij (u_j - u_i) - kappa_i u_i on a grid, zero exterior."""

    grid: Grid
    alpha: float
    W: np.ndarray
    kappa: np.ndarray
    nu: Optional[np.ndarray]
    symmetric: bool
    gamma: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.row_mass = self.W.sum(axis=1)

    @property
    def n(self):
        return self.grid.n

    def apply(self, u):
        return self.W @ u - (self.row_mass + self.kappa) * u

    def matrix(self):
        L = self.W.copy()
        L[np.diag_indices_from(L)] -= self.row_mass + self.kappa
        return L

    def shifted_matrix(self, m):
        """Dense m I - L."""
        A = -self.W.copy()
        A[np.diag_indices_from(A)] += self.row_mass + self.kappa + m
        return A

    def inner(self, u, v):
        """Discrete L^2(nu) pairing h^d sum nu u v (plain pairing when nu is undefined)."""
        w = self.nu if self.nu is not None else 1.0
        return self.grid.cell_volume * float(np.sum(w * u * v))


def _kernel_block(model, eps, xs, ys, seed):
    return np.asarray(model.pair_matrix(eps, xs, ys, seed), dtype=float)


def _exterior_kappa_1d(model, eps, grid, seed, n_near, n_exp):
    """Lattice sum of Lambda(x_i, y_j) w(|i - j|) over exterior cells j of the infinite grid."""
    M, h, a = grid.M, grid.h, model.alpha
    xs = grid.centers()
    n_exp = max(int(n_exp), n_near + 1)
    w = offset_weights(1, a, n_near, M + n_exp, h)
    i = np.arange(M)
    kappa = np.zeros(M)
    for side in (1, -1):
        j = M + np.arange(n_exp) if side > 0 else -1 - np.arange(n_exp)
        ys = (-grid.R_dom + (j + 0.5) * h)[:, None]
        lam = _kernel_block(model, eps, xs, ys, seed)
        kappa += np.sum(lam * w[np.abs(j[None, :] - i[:, None])], axis=1)
        # remainder beyond the explicit band; all offsets there are far-field
        first = (M + n_exp) if side > 0 else -1 - n_exp
        k0 = np.abs(first - i).astype(float)
        period = model.y_period(eps)
        K = None if period is None else period / h
        if K is not None and abs(K - round(K)) < 1e-9 and round(K) >= 1:
            K = int(round(K))
            r = np.arange(K)
            yr = (-grid.R_dom + (first + side * r + 0.5) * h)[:, None]
            lam_r = _kernel_block(model, eps, xs, yr, seed)
            z = zeta(1.0 + a, (k0[:, None] + r[None, :]) / K)
            kappa += h ** (-a) * K ** (-1.0 - a) * np.sum(lam_r * z, axis=1)
        else:
            yref = np.full((M, 1), -grid.R_dom + (first + 0.5) * h)
            mean = np.asarray(model.exterior_mean(eps, xs, yref, seed), dtype=float).reshape(M)
            kappa += mean * h ** (-a) * zeta(1.0 + a, k0)
    return kappa


def _exterior_kappa_2d(model, eps, grid, seed, n_near, n_band):
    """Explicit exterior band of cells plus a continuum tail scaled by the exterior mean."""
    M, h, a = grid.M, grid.h, model.alpha
    xs = grid.centers()
    idx = grid.index()
    n_band = max(int(n_band), n_near + 1)
    E = M + 2 * n_band
    w = offset_weights(2, a, n_near, E, h)
    g = np.meshgrid(np.arange(-n_band, M + n_band), np.arange(-n_band, M + n_band), indexing="ij")
    ext = np.stack([c.ravel() for c in g], axis=-1)
    outside = np.any((ext < 0) | (ext >= M), axis=1)
    ext = ext[outside]
    ys = -grid.R_dom + (ext + 0.5) * h
    kappa = np.zeros(grid.n)
    chunk = max(1, 2_000_000 // max(1, len(ext)))
    for s in range(0, grid.n, chunk):
        sl = slice(s, s + chunk)
        lam = _kernel_block(model, eps, xs[sl], ys, seed)
        off = np.abs(idx[sl, None, :] - ext[None, :, :])
        kappa[sl] = np.sum(lam * w[off[..., 0], off[..., 1]], axis=1)
    lo = -grid.R_dom - n_band * h
    hi = grid.R_dom + n_band * h
    tail = complement_tail_2d(xs, lo, hi, a)
    yref = np.clip(xs * (hi / grid.R_dom), lo, hi)
    mean = np.asarray(model.exterior_mean(eps, xs, yref, seed), dtype=float).reshape(grid.n)
    return kappa + mean * tail


def assemble(model, eps, grid, r_near=None, seed=None, n_exp=None, check=True):
    """Assemble the discrete L^eps of ``model`` on ``grid``.

    ``r_near`` is a length (default: ``default_near_cells`` cells); ``n_exp`` is the
    width in cells of the explicitly summed exterior band (default M in d=1, M/2 in d=2).
    """
    from .kernels import check_ellipticity, symmetrizing_weight

    if grid.d != model.d:
        raise ConfigError(f"grid is d={grid.d} but kernel is d={model.d}")
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if check:
        rep = check_ellipticity(model, budget=256)
        if not rep.passed:
            raise ConfigError(f"kernel violates ellipticity: {rep.witness}")
    if r_near is None:
        n_near = default_near_cells(grid.d, float(model.alpha))
    else:
        n_near = int(round(r_near / grid.h))
        if n_near < 3:
            raise ConfigError(f"r_near must be at least 3h, got {r_near} with h={grid.h}")
    xs = grid.centers()
    idx = grid.index()
    if grid.d == 1:
        w = offset_weights(1, model.alpha, n_near, grid.M, grid.h)
        base = w[np.abs(idx[:, 0][:, None] - idx[:, 0][None, :])]
    else:
        w = offset_weights(2, model.alpha, n_near, grid.M, grid.h)
        d0 = np.abs(idx[:, 0][:, None] - idx[:, 0][None, :])
        d1 = np.abs(idx[:, 1][:, None] - idx[:, 1][None, :])
        base = w[d0, d1]
    lam = _kernel_block(model, eps, xs, xs, seed)
    if model.symmetric:
        # one kernel evaluation per unordered pair
        lam = np.triu(lam) + np.triu(lam, 1).T
    W = lam * base
    np.fill_diagonal(W, 0.0)
    if grid.d == 1:
        kappa = _exterior_kappa_1d(model, eps, grid, seed, n_near, grid.M if n_exp is None else n_exp)
    else:
        kappa = _exterior_kappa_2d(model, eps, grid, seed, n_near, grid.M // 2 if n_exp is None else n_exp)
    try:
        nu = np.asarray(symmetrizing_weight(model, eps, xs, seed), dtype=float).reshape(grid.n)
    except ConfigError:
        nu = None
    meta = {"case": model.case, "eps": float(eps), "seed": seed, "n_near": n_near}
    return DiscreteOperator(grid, float(model.alpha), W, kappa, nu, bool(model.symmetric),
                            float(model.gamma), meta)


def apply(op, u):
    u = np.asarray(u, dtype=float)
    if u.shape != (op.n,):
        raise ConfigError(f"grid function has shape {u.shape}, expected ({op.n},)")
    return op.apply(u)


def _pair_power_sum(A, u, v=None, p=2.0, chunk=512):
    """sum_ij A_ij |u_j - u_i|^{p-2}(u_j - u_i)(v_j - v_i), row-chunked."""
    n = len(u)
    total = 0.0
    for s in range(0, n, chunk):
        du = u[None, :] - u[s:s + chunk, None]
        if v is None:
            term = np.abs(du) ** p
        else:
            dv = v[None, :] - v[s:s + chunk, None]
            term = du * dv if p == 2.0 else np.abs(du) ** (p - 2.0) * du * dv
        total += float(np.sum(A[s:s + chunk] * term))
    return total


def energy_form(op, u, v=None, nu=None):
    """h^d [ 1/2 sum nu_i W_ij (u_j-u_i)(v_j-v_i) + sum nu_i kappa_i u_i v_i ]."""
    u = np.asarray(u, dtype=float)
    v = u if v is None else np.asarray(v, dtype=float)
    if nu is None:
        nu = op.nu
    if nu is None:
        raise ConfigError("energy form needs a symmetrizing weight for a non-symmetric kernel")
    A = nu[:, None] * op.W
    pair = _pair_power_sum(A, u, v)
    return op.grid.cell_volume * (0.5 * pair + float(np.sum(nu * op.kappa * u * v)))


@functools.lru_cache(maxsize=16)
def _unit_operator(grid_key, alpha, r_near):
    from .kernels import ConstantKernel

    d, R, h, _ = grid_key
    grid = build_grid(d, R, h)
    return assemble(ConstantKernel(1.0, alpha, 2.0, d), 1.0, grid, r_near=r_near, check=False)


def unit_operator(grid, alpha, r_near=None):
    """Operator of the unit kernel Lambda == 1 (cached per grid)."""
    return _unit_operator(grid.key(), float(alpha), r_near)


def fractional_seminorm(grid, u, alpha, p=2.0, r_near=None):
    """(h^d [sum_ij w0_ij |u_j - u_i|^p + 2 sum_i kappa0_i |u_i|^p])^{1/p} with Lambda == 1.

    The exterior term counts ordered pairs with one point outside the box, where u = 0.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.n,):
        raise ConfigError(f"grid function has shape {u.shape}, expected ({grid.n},)")
    op = unit_operator(grid, alpha, r_near)
    s = _pair_power_sum(op.W, u, None, p) + 2.0 * float(np.sum(op.kappa * np.abs(u) ** p))
    return (grid.cell_volume * s) ** (1.0 / p)
