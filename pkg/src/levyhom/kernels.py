"""Oscillating jump kernels Lambda^eps(x, y) for the five coefficient regimes.

Every model evaluates vectorised over broadcastable point arrays of shape (..., d)
and exposes a ``pair_matrix`` fast path used by operator assembly.

Cases
-----
``p1``      lambda(x/eps) mu(y/eps), periodic product
``p2``      a(x, y) Lambda_per(x/eps, y/eps), symmetric locally periodic
``q1``      lambda(x/eps, omega) mu(y/eps, omega), random product
``q2``      a(x, y) Lambda_Omega(T_{x/eps} omega, T_{y/eps} omega), torus rotation
``nonsym``  Lambda_per(x/eps, y/eps) with no symmetry, alpha < 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, FieldError
from .fields import (
    RandomFieldSpec,
    TorusField,
    TorusRotation,
    default_rotation,
    omega_grid,
    stream_seed,
)
from .matrixio import read_matrix


def _points(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return x


def _check_alpha_gamma(alpha, gamma):
    if not 0 < alpha < 2:
        raise ConfigError(f"alpha must lie in (0, 2), got {alpha}")
    if not gamma > 1:
        raise ConfigError(f"gamma must exceed 1, got {gamma}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MacroModulation:
    """Slowly varying symmetric factor a(x, y) with values in [a0, a1].

    ``const``: a = value.  ``exp_decay``: a = value + amp * exp(-|x - y|).
    """

    kind: str = "const"
    value: float = 1.0
    amp: float = 0.0

    def __post_init__(self):
        if self.kind not in ("const", "exp_decay"):
            raise ConfigError(f"unknown macro modulation {self.kind!r}")
        if not self.value > 0 or self.amp < 0 or not math.isfinite(self.value + self.amp):
            raise ConfigError("macro modulation needs value > 0 and amp >= 0")

    @property
    def bounds(self):
        if self.kind == "const":
            return (self.value, self.value)
        return (self.value, self.value + self.amp)

    @property
    def is_constant(self):
        return self.kind == "const" or self.amp == 0

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "const":
            return np.full(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), self.value)
        r = np.sqrt(np.sum((x - y) ** 2, axis=-1))
        return self.value + self.amp * np.exp(-r)


@dataclass(frozen=True, eq=False)
class PairTable:
    """Piecewise-constant function on the torus squared: cells of [0,1)^d x [0,1)^d."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim not in (2, 4) or len(set(s.shape)) != 1:
            raise FieldError(f"pair table must have shape (N,)*2d with d in {{1,2}}, got {s.shape}")
        bad = np.argwhere(~np.isfinite(s))
        if bad.size:
            raise FieldError(f"non-finite pair-table entry at cell {tuple(int(i) for i in bad[0])}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def d(self):
        return self.samples.ndim // 2

    @property
    def N(self):
        return self.samples.shape[0]

    def swapped(self):
        """Table of (xi, eta) -> Lambda(eta, xi)."""
        if self.d == 1:
            return self.samples.T
        return np.transpose(self.samples, (2, 3, 0, 1))

    def asymmetry(self):
        """Max |Lambda(xi, eta) - Lambda(eta, xi)| over the table and a witness cell."""
        diff = np.abs(self.samples - self.swapped())
        idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
        return float(diff[idx]), tuple(int(i) for i in idx)

    def index(self, xi):
        xi = _points(xi, self.d)
        return np.floor(xi * self.N).astype(np.int64) % self.N

    def lookup(self, ixi, ieta):
        """Table values at integer cell indices (arrays of shape (..., d))."""
        idx = tuple(ixi[..., a] for a in range(self.d)) + tuple(ieta[..., a] for a in range(self.d))
        return self.samples[idx]

    def __call__(self, xi, eta):
        return self.lookup(self.index(xi), self.index(eta))

    def lipschitz_quotient(self):
        """Largest neighbour-difference quotient |Delta Lambda| * N along any table axis (periodic)."""
        s = self.samples
        q = 0.0
        for ax in range(s.ndim):
            q = max(q, float(np.max(np.abs(np.roll(s, -1, axis=ax) - s))) * self.N)
        return q

    def row_mean(self):
        """xi -> mean over eta of Lambda(xi, eta), as a TorusField."""
        axes = tuple(range(self.d, 2 * self.d))
        return TorusField(np.mean(self.samples, axis=axes))

    def weighted_mean(self, p):
        """Mean over the torus squared of Lambda(xi, eta) p(xi)."""
        return float(np.mean(self.row_mean().samples * np.asarray(p.samples)))


def make_pair_table(d, N, generator):
    """Tabulate a periodic two-point rule at cell centres, or wrap an explicit table."""
    if d not in (1, 2):
        raise FieldError(f"d must be 1 or 2, got {d}")
    N = int(N)
    if N < 1:
        raise FieldError("N must be positive")
    if callable(generator):
        c = (np.arange(N) + 0.5) / N
        grids = np.meshgrid(*([c] * (2 * d)), indexing="ij")
        xi = np.stack(grids[:d], axis=-1)
        eta = np.stack(grids[d:], axis=-1)
        vals = np.asarray(generator(xi, eta), dtype=float)
        vals = np.broadcast_to(vals, (N,) * (2 * d)).copy()
    else:
        vals = np.asarray(generator, dtype=float)
        if vals.shape != (N,) * (2 * d):
            raise FieldError(f"pair table shape {vals.shape} does not match {(N,) * (2 * d)}")
    bad = np.argwhere(~np.isfinite(vals))
    if bad.size:
        raise FieldError(f"generator returned a non-finite value at cell {tuple(int(i) for i in bad[0])}")
    return PairTable(vals)


def load_pair_table(path, d=1):
    """Read a pair table from a matrix file (d=2 tables are stored as N^2 x N^2)."""
    arr = read_matrix(path)
    if d == 1:
        return PairTable(np.atleast_2d(arr))
    N = int(round(math.sqrt(arr.shape[0])))
    return PairTable(arr.reshape(N, N, N, N))


# ---------------------------------------------------------------------------
# kernel models
# ---------------------------------------------------------------------------

class KernelModel:
    """Common interface; subclasses fill in ``values`` and the metadata flags."""

    case = "base"
    alpha: float
    gamma: float
    d: int

    #: Lambda(x, y) == Lambda(y, x) exactly
    symmetric = False
    #: needs a realization seed to evaluate
    random = False

    def values(self, eps, x, y, seed=None):
        raise NotImplementedError

    def pair_matrix(self, eps, xs, ys, seed=None):
        """Matrix Lambda^eps(xs[i], ys[j]) for point lists of shape (n, d)."""
        xs = _points(xs, self.d)
        ys = _points(ys, self.d)
        return self.values(eps, xs[:, None, :], ys[None, :, :], seed)

    def y_period(self, eps):
        """Period in y (same for every axis) if y -> Lambda(x, y) is eps-periodic, else None."""
        return None

    def exterior_mean(self, eps, x, yref, seed=None):
        """Average of y -> Lambda(x, y) over many periods near ``yref`` (far-field tail value)."""
        raise NotImplementedError

    def _require_seed(self, seed):
        if self.random and seed is None:
            raise ConfigError(f"{self.case} kernel needs a realization seed")


@dataclass(frozen=True, eq=False)
class ConstantKernel(KernelModel):
    """Lambda == c; the homogenized kernel of the P1, Q1 and NonSym cases."""

    c: float
    alpha: float
    gamma: float
    d: int = 1
    case = "const"
    symmetric = True

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)
        if not 1.0 / self.gamma <= self.c <= self.gamma:
            raise FieldError(f"constant kernel {self.c} outside [{1 / self.gamma:.6g}, {self.gamma:.6g}]")

    def values(self, eps, x, y, seed=None):
        x = _points(x, self.d)
        y = _points(y, self.d)
        return np.full(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), float(self.c))

    def y_period(self, eps):
        return eps

    def exterior_mean(self, eps, x, yref, seed=None):
        return np.full(_points(x, self.d).shape[:-1], float(self.c))


@dataclass(frozen=True, eq=False)
class MacroKernel(KernelModel):
    """Lambda = c * a(x, y); the homogenized kernel of the P2 and Q2 cases."""

    macro: MacroModulation
    c: float
    alpha: float
    gamma: float
    d: int = 1
    case = "macro"
    symmetric = True

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)

    def values(self, eps, x, y, seed=None):
        return self.c * self.macro(_points(x, self.d), _points(y, self.d))

    def y_period(self, eps):
        return eps if self.macro.is_constant else None

    def exterior_mean(self, eps, x, yref, seed=None):
        return self.values(eps, x, yref)


@dataclass(frozen=True, eq=False)
class P1Kernel(KernelModel):
    lam: TorusField
    mu: TorusField
    alpha: float
    gamma: float
    case = "p1"

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)
        if self.lam.d != self.mu.d:
            raise ConfigError("lambda and mu must share the dimension")

    @property
    def d(self):
        return self.lam.d

    @property
    def symmetric(self):
        # lambda(x) mu(y) == lambda(y) mu(x) iff mu / lambda is constant
        if self.lam.N != self.mu.N:
            return False
        ratio = self.mu.samples / self.lam.samples
        return bool(np.all(ratio == ratio.flat[0]))

    def values(self, eps, x, y, seed=None):
        return self.lam(_points(x, self.d) / eps) * self.mu(_points(y, self.d) / eps)

    def pair_matrix(self, eps, xs, ys, seed=None):
        xs = _points(xs, self.d)
        ys = _points(ys, self.d)
        return np.outer(self.lam(xs / eps), self.mu(ys / eps))

    def weight(self, eps, x):
        x = _points(x, self.d)
        return self.mu(x / eps) / self.lam(x / eps)

    def y_period(self, eps):
        return eps

    def exterior_mean(self, eps, x, yref, seed=None):
        return self.lam(_points(x, self.d) / eps) * float(np.mean(self.mu.samples))


@dataclass(frozen=True, eq=False)
class P2Kernel(KernelModel):
    macro: MacroModulation
    table: PairTable
    alpha: float
    gamma: float
    case = "p2"

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)

    @property
    def d(self):
        return self.table.d

    @property
    def symmetric(self):
        return self.table.asymmetry()[0] == 0.0

    def values(self, eps, x, y, seed=None):
        x = _points(x, self.d)
        y = _points(y, self.d)
        return self.macro(x, y) * self.table(x / eps, y / eps)

    def pair_matrix(self, eps, xs, ys, seed=None):
        xs = _points(xs, self.d)
        ys = _points(ys, self.d)
        per = self.table.lookup(self.table.index(xs / eps)[:, None, :], self.table.index(ys / eps)[None, :, :])
        if self.macro.is_constant:
            return self.macro.value * per
        return self.macro(xs[:, None, :], ys[None, :, :]) * per

    def y_period(self, eps):
        return eps if self.macro.is_constant else None

    def exterior_mean(self, eps, x, yref, seed=None):
        x = _points(x, self.d)
        rows = self.table.row_mean()(x / eps)
        return self.macro(x, _points(yref, self.d)) * rows


@dataclass(frozen=True, eq=False)
class NonSymKernel(KernelModel):
    """Purely periodic kernel without symmetry; the cell eigenproblem supplies the weight."""

    table: PairTable
    alpha: float
    gamma: float
    lipschitz: Optional[float] = None
    case = "nonsym"

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)
        if not self.alpha < 1:
            raise ConfigError(f"non-symmetric kernels require alpha < 1, got {self.alpha}")
        q = self.table.lipschitz_quotient()
        if self.lipschitz is None:
            object.__setattr__(self, "lipschitz", q)
        elif q > self.lipschitz:
            raise ConfigError(f"discrete Lipschitz quotient {q:.6g} exceeds declared bound {self.lipschitz:.6g}")

    @property
    def d(self):
        return self.table.d

    @property
    def symmetric(self):
        return self.table.asymmetry()[0] == 0.0

    def values(self, eps, x, y, seed=None):
        return self.table(_points(x, self.d) / eps, _points(y, self.d) / eps)

    def pair_matrix(self, eps, xs, ys, seed=None):
        xs = _points(xs, self.d)
        ys = _points(ys, self.d)
        return self.table.lookup(self.table.index(xs / eps)[:, None, :], self.table.index(ys / eps)[None, :, :])

    def y_period(self, eps):
        return eps

    def exterior_mean(self, eps, x, yref, seed=None):
        return self.table.row_mean()(_points(x, self.d) / eps)


@dataclass(frozen=True, eq=False)
class Q1Kernel(KernelModel):
    lam: RandomFieldSpec
    mu: RandomFieldSpec
    alpha: float
    gamma: float
    case = "q1"
    random = True

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)
        if self.lam.d != self.mu.d:
            raise ConfigError("lambda and mu specs must share the dimension")

    @property
    def d(self):
        return self.lam.d

    def values(self, eps, x, y, seed=None):
        self._require_seed(seed)
        return self.lam.evaluate(_points(x, self.d) / eps, seed) * self.mu.evaluate(_points(y, self.d) / eps, seed)

    def pair_matrix(self, eps, xs, ys, seed=None):
        self._require_seed(seed)
        xs = _points(xs, self.d)
        ys = _points(ys, self.d)
        return np.outer(self.lam.evaluate(xs / eps, seed), self.mu.evaluate(ys / eps, seed))

    def weight(self, eps, x, seed):
        self._require_seed(seed)
        x = _points(x, self.d)
        return self.mu.evaluate(x / eps, seed) / self.lam.evaluate(x / eps, seed)

    def exterior_mean(self, eps, x, yref, seed=None):
        self._require_seed(seed)
        return self.lam.evaluate(_points(x, self.d) / eps, seed) * self.mu.mean()


def _omega_rule_product(g):
    return lambda w1, w2: g(w1) * g(w2)


@dataclass(frozen=True, eq=False)
class Q2Kernel(KernelModel):
    """a(x, y) * Lambda_Omega(T_{x/eps} omega, T_{y/eps} omega) with Omega = T^k."""

    macro: MacroModulation
    omega_rule: Callable
    alpha: float
    gamma: float
    d: int = 1
    rotation: Optional[TorusRotation] = None
    seed: int = 0
    n_omega: int = 32
    case = "q2"
    random = True
    _mean: float = field(init=False, repr=False, default=None)

    def __post_init__(self):
        _check_alpha_gamma(self.alpha, self.gamma)
        if self.rotation is None:
            object.__setattr__(self, "rotation", default_rotation(self.d))
        elif self.rotation.d != self.d:
            raise ConfigError("rotation dimension does not match d")

    @property
    def symmetric(self):
        return True

    def omega_mean(self):
        """Double Haar mean of Lambda_Omega over Omega x Omega (midpoint grid)."""
        if self._mean is None:
            g = omega_grid(self.rotation.k, self.n_omega)
            vals = self.omega_rule(g[:, None, :], g[None, :, :])
            object.__setattr__(self, "_mean", float(np.mean(vals)))
        return self._mean

    def start(self, seed):
        return self.rotation.start(stream_seed(self.seed, seed))

    def values(self, eps, x, y, seed=None):
        self._require_seed(seed)
        x = _points(x, self.d)
        y = _points(y, self.d)
        w0 = self.start(seed)
        w1 = self.rotation.orbit(w0, x / eps)
        w2 = self.rotation.orbit(w0, y / eps)
        return self.macro(x, y) * self.omega_rule(w1, w2)

    def pair_matrix(self, eps, xs, ys, seed=None):
        self._require_seed(seed)
        xs = _points(xs, self.d)
        ys = _points(ys, self.d)
        w0 = self.start(seed)
        w1 = self.rotation.orbit(w0, xs / eps)
        w2 = self.rotation.orbit(w0, ys / eps)
        per = self.omega_rule(w1[:, None, :], w2[None, :, :])
        if self.macro.is_constant:
            return self.macro.value * per
        return self.macro(xs[:, None, :], ys[None, :, :]) * per

    def exterior_mean(self, eps, x, yref, seed=None):
        self._require_seed(seed)
        x = _points(x, self.d)
        # average over the second slot only; the first slot is pinned at T_{x/eps} omega
        g = omega_grid(self.rotation.k, self.n_omega)
        w1 = self.rotation.orbit(self.start(seed), x / eps)
        rows = np.mean(self.omega_rule(w1[..., None, :], g), axis=-1)
        return self.macro(x, _points(yref, self.d)) * rows


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def eval_kernel(model, eps, x, y, seed=None):
    """Lambda^eps(x, y); ``seed`` selects the realization for random models."""
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    v = model.values(eps, x, y, seed)
    return float(v) if np.ndim(v) == 0 else v


@dataclass
class CheckReport:
    """Outcome of a validation scan."""

    check: str
    passed: bool
    min: float = float("nan")
    max: float = float("nan")
    lower: float = float("nan")
    upper: float = float("nan")
    max_diff: float = 0.0
    witness: Optional[dict] = None
    details: list = field(default_factory=list)

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def _first_violation(values, lo, hi):
    bad = np.argwhere((values < lo) | (values > hi))
    if not bad.size:
        return None
    idx = tuple(int(i) for i in bad[0])
    return {"cell": list(idx), "value": float(values[idx])}


def _sample_points(rng, n, d, box=4.0):
    return rng.uniform(-box, box, size=(n, d))


def check_ellipticity(model, budget=1000, seed=0):
    """Scan tables exactly and rules on a seeded sample; compare with [1/gamma, gamma]."""
    if budget < 1:
        raise ConfigError("sample budget must be at least 1")
    lo, hi = 1.0 / model.gamma, model.gamma
    rng = np.random.default_rng(seed)
    parts = []  # (name, values, witness)

    def scan(name, vals):
        vals = np.asarray(vals, dtype=float)
        parts.append((name, float(vals.min()), float(vals.max()), _first_violation(vals, lo, hi)))

    if isinstance(model, P1Kernel):
        scan("lambda", model.lam.samples)
        scan("mu", model.mu.samples)
        prod = np.multiply.outer(model.lam.samples.ravel(), model.mu.samples.ravel())
        scan("product", prod)
    elif isinstance(model, Q1Kernel):
        for name, spec in (("lambda", model.lam), ("mu", model.mu)):
            if spec.finite_state:
                scan(name, spec.states)
            else:
                scan(name, spec.profile(rng.uniform(size=(budget, spec.rotation.k))))
        la = model.lam.states if model.lam.finite_state else parts[0][1:3]
        mu = model.mu.states if model.mu.finite_state else parts[1][1:3]
        scan("product", np.multiply.outer(np.asarray(la), np.asarray(mu)))
    elif isinstance(model, (P2Kernel, NonSymKernel)):
        macro = getattr(model, "macro", MacroModulation())
        a0, a1 = macro.bounds
        t = model.table.samples
        scan("table", t)
        if not macro.is_constant:
            x = _sample_points(rng, budget, model.d)
            y = _sample_points(rng, budget, model.d)
            a = macro(x, y)
            a0, a1 = min(a0, float(a.min())), max(a1, float(a.max()))
        scan("kernel", np.array([a0 * t.min(), a1 * t.max()]))
    elif isinstance(model, Q2Kernel):
        k = model.rotation.k
        w1 = rng.uniform(size=(budget, k))
        w2 = rng.uniform(size=(budget, k))
        x = _sample_points(rng, budget, model.d)
        y = _sample_points(rng, budget, model.d)
        scan("kernel", model.macro(x, y) * model.omega_rule(w1, w2))
    elif isinstance(model, (ConstantKernel, MacroKernel)):
        x = _sample_points(rng, budget, model.d)
        y = _sample_points(rng, budget, model.d)
        scan("kernel", model.values(1.0, x, y))
    else:
        raise ConfigError(f"unsupported model {type(model).__name__}")

    witness = None
    for name, vmin, vmax, w in parts:
        if w is not None and witness is None:
            witness = dict(w, part=name)
    vmin = min(p[1] for p in parts)
    vmax = max(p[2] for p in parts)
    return CheckReport(
        check="ellipticity", passed=witness is None, min=vmin, max=vmax, lower=lo, upper=hi,
        witness=witness, details=[{"part": p[0], "min": p[1], "max": p[2]} for p in parts],
    )


def check_symmetry(model, budget=1000, seed=0):
    """max |Lambda(x,y,xi,eta) - Lambda(y,x,eta,xi)| over the table and a seeded sample."""
    if budget < 1:
        raise ConfigError("sample budget must be at least 1")
    if isinstance(model, NonSymKernel):
        raise ConfigError("non-symmetric kernels are validated by their Lipschitz bound, not symmetry")
    if not isinstance(model, (P2Kernel, Q2Kernel, ConstantKernel, MacroKernel)):
        raise ConfigError(f"symmetry check applies to p2/q2 models, got {model.case}")
    rng = np.random.default_rng(seed)
    diff, witness = 0.0, None
    macro = getattr(model, "macro", None)
    if isinstance(model, P2Kernel):
        diff, cell = model.table.asymmetry()
        if diff > 0:
            N, d = model.table.N, model.d
            witness = {"xi": [(c + 0.5) / N for c in cell[:d]], "eta": [(c + 0.5) / N for c in cell[d:]]}
    if isinstance(model, Q2Kernel):
        k = model.rotation.k
        w1 = rng.uniform(size=(budget, k))
        w2 = rng.uniform(size=(budget, k))
        dd = np.abs(model.omega_rule(w1, w2) - model.omega_rule(w2, w1))
        i = int(np.argmax(dd))
        if dd[i] > diff:
            diff, witness = float(dd[i]), {"omega1": w1[i].tolist(), "omega2": w2[i].tolist()}
    if macro is not None and not macro.is_constant:
        x = _sample_points(rng, budget, model.d)
        y = _sample_points(rng, budget, model.d)
        dd = np.abs(macro(x, y) - macro(y, x))
        i = int(np.argmax(dd))
        if dd[i] > diff:
            diff, witness = float(dd[i]), {"x": x[i].tolist(), "y": y[i].tolist()}
    return CheckReport(check="symmetry", passed=diff == 0.0, max_diff=diff, witness=witness)


def symmetrizing_weight(model, eps, x, seed=None):
    """Weight nu^eps(x) making L^eps self-adjoint in L^2(nu^eps)."""
    if isinstance(model, P1Kernel):
        v = model.weight(eps, x)
    elif isinstance(model, Q1Kernel):
        if seed is None:
            raise ConfigError("q1 weight is defined per realization; pass a seed")
        v = model.weight(eps, x, seed)
    elif isinstance(model, (P2Kernel, Q2Kernel, ConstantKernel, MacroKernel)):
        if isinstance(model, P2Kernel) and not model.symmetric:
            raise ConfigError("p2 table is not symmetric; no symmetrizing weight")
        v = np.ones(_points(x, model.d).shape[:-1])
    else:
        raise ConfigError(f"no symmetrizing weight is defined for {model.case} kernels")
    return float(v) if np.ndim(v) == 0 else v
