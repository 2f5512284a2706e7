"""Periodic and stationary random scalar fields used as kernel coefficients.

Periodic fields live on the unit torus as piecewise-constant cell tables
(:class:`TorusField`). Random fields are described by a :class:`RandomFieldSpec`
and evaluated pointwise from a 64-bit seed through a counter-based hash, so any
point of any realization can be reproduced without generating its neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import FieldError
from .matrixio import read_matrix, write_matrix

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SHIFT_SALT = 0x5348494654  # "SHIFT"
_START_SALT = 0x4F4D454741  # "OMEGA"


# ---------------------------------------------------------------------------
# counter-based hashing
# ---------------------------------------------------------------------------

def _as_u64(values):
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr
    return np.asarray(arr, dtype=np.int64).view(np.uint64)


def splitmix64(values):
    """SplitMix64 finaliser applied elementwise (wrapping uint64 arithmetic)."""
    z = _as_u64(np.atleast_1d(values)) + _GOLDEN
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def hash_counter(seed, *counters):
    """Hash a seed together with integer counter arrays (broadcast together)."""
    h = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for c in counters:
        h = splitmix64(h ^ splitmix64(c))
    return h


def uniform_from_hash(h):
    """Map uint64 hashes to doubles in [0, 1) using the top 53 bits."""
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def stream_seed(spec_seed, run_seed=0):
    """Seed of the stream for a spec under a given realization seed.

    Two specs with the same ``spec_seed`` see the same stream for every run seed,
    which is how coupled (comonotone) coefficient pairs are expressed.
    """
    h = hash_counter(int(spec_seed), np.int64(run_seed))
    return int(h[0])


# ---------------------------------------------------------------------------
# periodic fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TorusField:
    """Piecewise-constant 1-periodic function on the uniform cells of [0,1)^d."""

    samples: np.ndarray
    gamma: Optional[float] = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim not in (1, 2):
            raise FieldError(f"TorusField supports d in {{1, 2}}, got samples.ndim={s.ndim}")
        if len(set(s.shape)) != 1 or s.shape[0] < 1:
            raise FieldError(f"samples must have shape (N,)*d, got {s.shape}")
        bad = np.argwhere(~np.isfinite(s))
        if bad.size:
            raise FieldError(f"non-finite sample at cell {tuple(int(i) for i in bad[0])}")
        if self.gamma is not None:
            _check_bounds(s, self.gamma, "field")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def d(self):
        return self.samples.ndim

    @property
    def N(self):
        return self.samples.shape[0]

    def centers(self):
        """Cell centres, shape (N,)*d + (d,)."""
        c = (np.arange(self.N) + 0.5) / self.N
        grids = np.meshgrid(*([c] * self.d), indexing="ij")
        return np.stack(grids, axis=-1)

    def cell_index(self, xi):
        """Integer cell indices of points ``xi`` (shape (..., d)), wrapped periodically."""
        xi = np.asarray(xi, dtype=float)
        return np.floor(xi * self.N).astype(np.int64) % self.N

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        if self.d == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
            xi = xi[..., None]
        idx = self.cell_index(xi)
        return self.samples[tuple(idx[..., a] for a in range(self.d))]

    def resample(self, N):
        """Cell-centre samples of this field on a finer/coarser uniform grid."""
        probe = TorusField(np.zeros((N,) * self.d))
        return TorusField(self(probe.centers()), gamma=self.gamma)

    def save(self, path):
        write_matrix(path, self.samples)

    @classmethod
    def load(cls, path, gamma=None):
        return cls(read_matrix(path), gamma=gamma)


def _check_bounds(values, gamma, what):
    if not gamma > 1:
        raise FieldError(f"ellipticity constant must exceed 1, got {gamma}")
    lo, hi = 1.0 / gamma, gamma
    bad = np.argwhere((values < lo) | (values > hi))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise FieldError(
            f"{what} value {values[idx]!r} at cell {idx} outside [{lo:.6g}, {hi:.6g}]"
        )


def make_torus_field(d, N, generator, gamma=None):
    """Build a :class:`TorusField` from a pointwise rule or an explicit table.

    A callable ``generator`` is evaluated at the cell centres (array of shape
    (..., d)); anything else is taken as a table of shape (N,)*d.
    """
    if d not in (1, 2):
        raise FieldError(f"d must be 1 or 2, got {d}")
    if int(N) != N or N < 1:
        raise FieldError(f"N must be a positive integer, got {N}")
    N = int(N)
    if callable(generator):
        probe = TorusField(np.zeros((N,) * d))
        pts = probe.centers()
        vals = np.asarray(generator(pts), dtype=float)
        if vals.shape != (N,) * d:
            vals = np.broadcast_to(vals, (N,) * d).copy()
    else:
        vals = np.asarray(generator, dtype=float)
        if vals.shape != (N,) * d:
            raise FieldError(f"table shape {vals.shape} does not match (N,)*d = {(N,) * d}")
    bad = np.argwhere(~np.isfinite(vals))
    if bad.size:
        raise FieldError(f"generator returned a non-finite value at cell {tuple(int(i) for i in bad[0])}")
    return TorusField(vals, gamma=gamma)


def cell_average(f):
    """Mean of ``f`` over the unit cell (exact for piecewise-constant fields)."""
    return float(np.mean(f.samples))


def cell_average_ratio(mu, lam):
    """Cell average of the pointwise ratio mu / lam."""
    if mu.d != lam.d or mu.N != lam.N:
        raise FieldError(f"resolution mismatch: mu is d={mu.d}, N={mu.N}; lam is d={lam.d}, N={lam.N}")
    if np.any(lam.samples <= 0):
        raise FieldError("lam must be strictly positive")
    return float(np.mean(mu.samples / lam.samples))


# ---------------------------------------------------------------------------
# random stationary fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TorusRotation:
    """Ergodic flow T_xi(omega) = omega + A xi (mod 1) on the torus Omega = T^k."""

    directions: np.ndarray  # shape (k, d)

    def __post_init__(self):
        a = np.array(self.directions, dtype=float)
        if a.ndim != 2:
            raise FieldError("rotation directions must be a (k, d) matrix")
        a.setflags(write=False)
        object.__setattr__(self, "directions", a)

    @property
    def k(self):
        return self.directions.shape[0]

    @property
    def d(self):
        return self.directions.shape[1]

    def start(self, seed):
        """Initial point omega in T^k drawn from the seed."""
        h = hash_counter(seed, np.int64(_START_SALT), np.arange(self.k, dtype=np.int64))
        return uniform_from_hash(h)

    def orbit(self, omega0, xi):
        xi = np.asarray(xi, dtype=float)
        return np.mod(omega0 + xi @ self.directions.T, 1.0)


def default_rotation(d):
    """Rotation on T^2 with rationally independent directions."""
    if d == 1:
        return TorusRotation(np.array([[1.0], [math.sqrt(2.0)]]))
    if d == 2:
        return TorusRotation(np.array([[1.0, math.sqrt(3.0)], [math.sqrt(2.0), math.sqrt(5.0)]]))
    raise FieldError(f"d must be 1 or 2, got {d}")


CHECKERBOARD = "checkerboard"
ROTATION = "rotation"


@dataclass(frozen=True, eq=False)
class RandomFieldSpec:
    """Law of a stationary ergodic scalar field on R^d.

    ``checkerboard``: iid state per cell of side ``cell_size`` (state k with
    probability ``weights[k]``), plus one uniform global shift of the lattice.
    ``rotation``: ``profile(T_xi omega)`` with ``T`` a :class:`TorusRotation`.
    """

    kind: str
    d: int = 1
    states: Sequence[float] = ()
    weights: Optional[Sequence[float]] = None
    cell_size: float = 1.0
    seed: int = 0
    profile: Optional[Callable] = None
    rotation: Optional[TorusRotation] = None
    gamma: Optional[float] = None
    _cum: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.d not in (1, 2):
            raise FieldError(f"d must be 1 or 2, got {self.d}")
        if self.kind == CHECKERBOARD:
            states = tuple(float(s) for s in self.states)
            if not states:
                raise FieldError("checkerboard spec needs a non-empty state list")
            if not all(math.isfinite(s) for s in states):
                raise FieldError("checkerboard states must be finite")
            if self.weights is None:
                w = np.full(len(states), 1.0 / len(states))
            else:
                w = np.asarray(self.weights, dtype=float)
                if w.shape != (len(states),) or np.any(w < 0) or not w.sum() > 0:
                    raise FieldError("weights must be nonnegative, one per state")
                w = w / w.sum()
            if not self.cell_size > 0:
                raise FieldError("cell_size must be positive")
            if self.gamma is not None:
                _check_bounds(np.asarray(states), self.gamma, "state")
            object.__setattr__(self, "states", states)
            object.__setattr__(self, "weights", tuple(float(x) for x in w))
            cum = np.cumsum(w)
            cum[-1] = 1.0
            object.__setattr__(self, "_cum", cum)
        elif self.kind == ROTATION:
            if self.profile is None:
                raise FieldError("rotation spec needs a profile function on the torus")
            if self.rotation is None:
                object.__setattr__(self, "rotation", default_rotation(self.d))
            elif self.rotation.d != self.d:
                raise FieldError("rotation dimension does not match d")
        else:
            raise FieldError(f"unknown random field kind {self.kind!r}")

    @property
    def finite_state(self):
        return self.kind == CHECKERBOARD

    def shift(self, seed):
        h = hash_counter(seed, np.int64(_SHIFT_SALT), np.arange(self.d, dtype=np.int64))
        return uniform_from_hash(h)

    def state_index(self, xi, run_seed=0):
        """Index into ``states`` of the cell containing each point (checkerboard only)."""
        s = stream_seed(self.seed, run_seed)
        xi = np.asarray(xi, dtype=float)
        cells = np.floor(xi / self.cell_size + self.shift(s)).astype(np.int64)
        h = hash_counter(s, *(cells[..., a] for a in range(self.d)))
        u = uniform_from_hash(h).reshape(cells.shape[:-1])
        return np.minimum(np.searchsorted(self._cum, u, side="right"), len(self.states) - 1)

    def evaluate(self, xi, run_seed=0):
        """Field values at points ``xi`` (shape (..., d)) for realization ``run_seed``."""
        xi = np.asarray(xi, dtype=float)
        if self.d == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
            xi = xi[..., None]
        if self.kind == CHECKERBOARD:
            return np.asarray(self.states)[self.state_index(xi, run_seed)]
        omega0 = self.rotation.start(stream_seed(self.seed, run_seed))
        return np.asarray(self.profile(self.rotation.orbit(omega0, xi)), dtype=float)

    def mean(self, n_grid=64):
        """Expectation of the field value (exact for checkerboards, grid rule on T^k otherwise)."""
        if self.kind == CHECKERBOARD:
            return float(np.dot(self.weights, self.states))
        return float(np.mean(self.profile(omega_grid(self.rotation.k, n_grid))))


def omega_grid(k, n):
    """Midpoint grid on T^k, shape (n**k, k)."""
    c = (np.arange(n) + 0.5) / n
    grids = np.meshgrid(*([c] * k), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


@dataclass(frozen=True, eq=False)
class FieldRealization:
    """Values of one realization sampled at the midpoints of a window grid."""

    spec: RandomFieldSpec
    seed: int
    lo: np.ndarray
    hi: np.ndarray
    spacing: float
    values: np.ndarray

    def points(self):
        axes = [self.lo[a] + (np.arange(self.values.shape[a]) + 0.5) * self.spacing for a in range(self.spec.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def save(self, path):
        write_matrix(path, self.values)


def _window_bounds(window, d):
    w = np.asarray(window, dtype=float)
    if w.shape == (2,) and d == 1:
        w = w[None, :]
    if w.shape != (d, 2) or not np.all(np.isfinite(w)) or np.any(w[:, 1] <= w[:, 0]):
        raise FieldError(f"window must be a bounded box given as {d} (lo, hi) pairs")
    return w[:, 0].copy(), w[:, 1].copy()


def sample_realization(spec, window, seed=None, points_per_unit=16):
    """Sample one realization of ``spec`` on a bounded window.

    ``points_per_unit`` midpoints per unit length (per unit cell for checkerboards
    whose ``cell_size`` differs from 1 the count scales with the cell).
    """
    seed = spec.seed if seed is None else seed
    lo, hi = _window_bounds(window, spec.d)
    unit = spec.cell_size if spec.kind == CHECKERBOARD else 1.0
    spacing = unit / points_per_unit
    counts = np.maximum(np.round((hi - lo) / spacing).astype(int), 1)
    spacing = float(np.min((hi - lo) / counts))
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * spacing for a in range(spec.d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = spec.evaluate(pts, run_seed=seed)
    values.setflags(write=False)
    return FieldRealization(spec, int(seed), lo, lo + counts * spacing, spacing, values)


def birkhoff_average(spec, L, seed=None, points_per_unit=16):
    """Spatial average of one realization over the box [0, L]^d."""
    if not L > 0:
        raise FieldError(f"box side must be positive, got {L}")
    r = sample_realization(spec, [(0.0, L)] * spec.d, seed=seed, points_per_unit=points_per_unit)
    return float(np.mean(r.values))
