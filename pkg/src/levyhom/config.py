"""Experiment config files (YAML or JSON) and the generator tags they may use.

Every mapping is checked against an explicit key set before anything is built;
relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .experiments import SweepConfig, bump
from .fields import RandomFieldSpec, TorusField, make_torus_field
from .kernels import (
    ConstantKernel,
    MacroModulation,
    NonSymKernel,
    P1Kernel,
    P2Kernel,
    Q1Kernel,
    Q2Kernel,
    load_pair_table,
    make_pair_table,
)
from .matrixio import read_matrix

CASES = ("p1", "p2", "q1", "q2", "nonsym", "const")

TOP_KEYS = {
    "case", "d", "alpha", "gamma", "N",
    "lambda", "mu", "kernel", "macro", "lipschitz", "value",
    "lambda_spec", "mu_spec", "omega", "omega_seed",
    "m", "p", "eps", "f", "grid", "seeds", "tol", "nl_tol", "method",
    "naive", "effective", "cell", "ergodic", "output", "threads",
}
GRID_KEYS = {"R_dom", "K", "h", "r_near"}
FIELD_TAGS = {
    "constant": {"constant", "N"},
    "table": {"table"},
    "file": {"file"},
    "rule": {"rule", "mean", "amp", "N"},
}
PAIR_RULES = {
    "cos_diff": {"rule", "mean", "amp", "N"},
    "sin_sum": {"rule", "c", "a", "b", "N"},
    "product": {"rule", "f", "N"},
    "lam_mu": {"rule", "lambda", "mu", "N"},
}
OMEGA_RULES = {"product": {"rule", "mean", "amp", "axis"}, "const_plus_sinsin": {"rule", "c", "s", "axis"}}
RANDOM_KEYS = {"kind", "states", "weights", "cell_size", "seed", "profile"}
PROFILE_KEYS = {"mean", "amp", "axis"}
MACRO_KEYS = {"kind", "value", "amp"}
CELL_KEYS = {"N", "tol", "R_img", "max_iter"}
ERGODIC_KEYS = {"box", "eps", "points_per_period"}


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(mapping).__name__}")
    extra = sorted(set(mapping) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _num(mapping, key, where, default=None, positive=False):
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required key {where}.{key}")
        return default
    v = mapping[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}.{key} must be a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}.{key} must be positive, got {v!r}")
    return float(v)


def load_config(path):
    """Parse a YAML/JSON file into a dict and remember its directory for path resolution."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    _check_keys(doc, TOP_KEYS, "config")
    return Config(doc, path.resolve().parent)


class Config:
    """Validated view of a config document."""

    def __init__(self, doc, base_dir="."):
        _check_keys(doc, TOP_KEYS, "config")
        self.doc = doc
        self.base = Path(base_dir)
        self.case = doc.get("case", "p1")
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}, got {self.case!r}")
        self.d = int(doc.get("d", 1))
        if self.d not in (1, 2):
            raise ConfigError(f"d must be 1 or 2, got {self.d}")
        self.alpha = _num(doc, "alpha", "config")
        self.gamma = _num(doc, "gamma", "config")
        self.N = int(_num(doc, "N", "config", default=64, positive=True))
        self._check_schema()

    def _check_schema(self):
        """Key-level validation of every nested section, before anything is built."""
        doc = self.doc
        for key, allowed in (("grid", GRID_KEYS), ("cell", CELL_KEYS), ("ergodic", ERGODIC_KEYS), ("macro", MACRO_KEYS)):
            if key in doc:
                _check_keys(doc[key], allowed, key)
        for key in ("lambda", "mu"):
            if key in doc:
                _check_field_keys(doc[key], key)
        if "kernel" in doc:
            _check_pair_keys(doc["kernel"], "kernel")
        for key in ("lambda_spec", "mu_spec"):
            if key in doc:
                _check_keys(doc[key], RANDOM_KEYS, key)
                if "profile" in doc[key]:
                    _check_keys(doc[key]["profile"], PROFILE_KEYS, f"{key}.profile")
        if "omega" in doc:
            _check_rule_keys(doc["omega"], OMEGA_RULES, "omega")
        if "f" in doc:
            f = doc["f"]
            _check_keys(f, {"file"} if isinstance(f, dict) and "file" in f else {"tag", "radius", "center"}, "f")

    # -- paths -------------------------------------------------------------
    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else (self.base / p).resolve()

    def resolved(self):
        """Config echo with file paths made absolute."""

        def walk(obj):
            if isinstance(obj, dict):
                return {k: (str(self.path(v)) if k == "file" else walk(v)) for k, v in obj.items()}
            if isinstance(obj, list):
                return [walk(v) for v in obj]
            return obj

        return walk(self.doc)

    # -- fields and tables -------------------------------------------------
    def torus_field(self, spec, where):
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            spec = {"constant": spec}
        if isinstance(spec, list):
            spec = {"table": spec}
        if not isinstance(spec, dict) or not spec:
            raise ConfigError(f"{where} must be a mapping with one generator tag")
        if "constant" in spec:
            _check_keys(spec, {"constant", "N"}, where)
            c = _num(spec, "constant", where)
            N = int(spec.get("N", 1))
            return make_torus_field(self.d, N, np.full((N,) * self.d, c))
        if "table" in spec:
            _check_keys(spec, {"table"}, where)
            arr = np.asarray(spec["table"], dtype=float)
            return make_torus_field(self.d, arr.shape[0], arr)
        if "file" in spec:
            _check_keys(spec, {"file"}, where)
            arr = read_matrix(self.path(spec["file"]))
            return make_torus_field(self.d, arr.shape[0], arr)
        if "rule" in spec:
            _check_keys(spec, {"rule", "mean", "amp", "N"}, where)
            if spec["rule"] != "cos":
                raise ConfigError(f"unknown field rule {spec['rule']!r} in {where} (known: cos)")
            mean, amp = _num(spec, "mean", where), _num(spec, "amp", where)
            N = int(spec.get("N", self.N))
            return make_torus_field(self.d, N, lambda xi: mean + amp * np.cos(2 * np.pi * xi[..., 0]))
        raise ConfigError(f"{where} needs one of: constant, table, file, rule")

    def _profile(self, spec, where):
        _check_keys(spec, {"mean", "amp", "axis"}, where)
        mean, amp = _num(spec, "mean", where), _num(spec, "amp", where)
        axis = int(spec.get("axis", 1))
        return lambda w: mean + amp * np.cos(2 * np.pi * w[..., axis])

    def pair_table(self, spec, where="kernel"):
        if not isinstance(spec, dict):
            raise ConfigError(f"{where} must be a mapping")
        N = int(spec.get("N", self.N))
        if "table" in spec:
            _check_keys(spec, {"table"}, where)
            arr = np.asarray(spec["table"], dtype=float)
            return make_pair_table(self.d, arr.shape[0], arr)
        if "file" in spec:
            _check_keys(spec, {"file"}, where)
            return load_pair_table(self.path(spec["file"]), self.d)
        rule = spec.get("rule")
        two_pi = 2 * np.pi
        if rule == "cos_diff":
            _check_keys(spec, {"rule", "mean", "amp", "N"}, where)
            mean, amp = _num(spec, "mean", where), _num(spec, "amp", where)
            fn = lambda xi, eta: mean + amp * np.cos(two_pi * (xi[..., 0] - eta[..., 0]))
        elif rule == "sin_sum":
            _check_keys(spec, {"rule", "c", "a", "b", "N"}, where)
            c, a, b = _num(spec, "c", where), _num(spec, "a", where), _num(spec, "b", where)
            fn = lambda xi, eta: c + a * np.sin(two_pi * xi[..., 0]) + b * np.sin(two_pi * eta[..., 0])
        elif rule == "product":
            _check_keys(spec, {"rule", "f", "N"}, where)
            fld = self.torus_field(spec.get("f"), f"{where}.f")
            fn = lambda xi, eta: fld(xi) * fld(eta)
        elif rule == "lam_mu":
            _check_keys(spec, {"rule", "lambda", "mu", "N"}, where)
            lam = self.torus_field(spec.get("lambda"), f"{where}.lambda")
            mu = self.torus_field(spec.get("mu"), f"{where}.mu")
            fn = lambda xi, eta: lam(xi) * mu(eta)
        else:
            raise ConfigError(f"{where} needs table, file, or rule in (cos_diff, sin_sum, product, lam_mu)")
        return make_pair_table(self.d, N, fn)

    def random_spec(self, spec, where):
        _check_keys(spec, {"kind", "states", "weights", "cell_size", "seed", "profile"}, where)
        kind = spec.get("kind", "checkerboard")
        seed = int(spec.get("seed", 0))
        if kind == "checkerboard":
            return RandomFieldSpec(kind, d=self.d, states=tuple(spec.get("states", ())), weights=spec.get("weights"),
                                   cell_size=float(spec.get("cell_size", 1.0)), seed=seed)
        if kind == "rotation":
            if "profile" not in spec:
                raise ConfigError(f"{where}: rotation fields need a profile")
            return RandomFieldSpec(kind, d=self.d, seed=seed, profile=self._profile(spec["profile"], f"{where}.profile"))
        raise ConfigError(f"{where}.kind must be checkerboard or rotation, got {kind!r}")

    def macro(self):
        spec = self.doc.get("macro", {"kind": "const", "value": 1.0})
        _check_keys(spec, {"kind", "value", "amp"}, "macro")
        return MacroModulation(spec.get("kind", "const"), float(spec.get("value", 1.0)), float(spec.get("amp", 0.0)))

    def omega_rule(self):
        spec = self.doc.get("omega")
        if not isinstance(spec, dict):
            raise ConfigError("q2 needs an 'omega' rule mapping")
        rule = spec.get("rule")
        if rule == "product":
            _check_keys(spec, {"rule", "mean", "amp", "axis"}, "omega")
            g = self._profile({k: v for k, v in spec.items() if k != "rule"}, "omega")
            return lambda w1, w2: g(w1) * g(w2)
        if rule == "const_plus_sinsin":
            _check_keys(spec, {"rule", "c", "s", "axis"}, "omega")
            c, s = _num(spec, "c", "omega"), _num(spec, "s", "omega")
            ax = int(spec.get("axis", 1))
            return lambda w1, w2: c + s * np.sin(2 * np.pi * w1[..., ax]) * np.sin(2 * np.pi * w2[..., ax])
        raise ConfigError("omega.rule must be product or const_plus_sinsin")

    # -- model ---------------------------------------------------------------
    def model(self):
        doc, a, g = self.doc, self.alpha, self.gamma
        if self.case == "p1":
            return P1Kernel(self.torus_field(doc.get("lambda"), "lambda"), self.torus_field(doc.get("mu"), "mu"), a, g)
        if self.case == "p2":
            return P2Kernel(self.macro(), self.pair_table(doc.get("kernel")), a, g)
        if self.case == "nonsym":
            lip = doc.get("lipschitz")
            return NonSymKernel(self.pair_table(doc.get("kernel")), a, g, None if lip is None else float(lip))
        if self.case == "q1":
            return Q1Kernel(self.random_spec(doc.get("lambda_spec", {}), "lambda_spec"),
                            self.random_spec(doc.get("mu_spec", {}), "mu_spec"), a, g)
        if self.case == "q2":
            return Q2Kernel(self.macro(), self.omega_rule(), a, g, d=self.d, seed=int(doc.get("omega_seed", 0)))
        return ConstantKernel(_num(doc, "value", "config"), a, g, self.d)

    # -- problem data --------------------------------------------------------
    def eps_list(self):
        eps = self.doc.get("eps")
        if eps is None:
            raise ConfigError("missing required key config.eps")
        return [float(e) for e in (eps if isinstance(eps, list) else [eps])]

    def grid_params(self):
        gp = self.doc.get("grid", {})
        _check_keys(gp, GRID_KEYS, "grid")
        return gp

    def source(self, grid=None):
        spec = self.doc.get("f", {"tag": "bump"})
        if not isinstance(spec, dict):
            raise ConfigError("f must be a mapping")
        if "file" in spec:
            _check_keys(spec, {"file"}, "f")
            vals = read_matrix(self.path(spec["file"])).ravel()
            return lambda x: vals if len(vals) == len(x) else _size_error(len(vals), len(x))
        _check_keys(spec, {"tag", "radius", "center"}, "f")
        if spec.get("tag", "bump") != "bump":
            raise ConfigError(f"unknown source tag {spec.get('tag')!r} (known: bump, or give a file)")
        return bump(float(spec.get("radius", 1.0)), float(spec.get("center", 0.0)))

    def cell_params(self):
        cp = self.doc.get("cell", {})
        _check_keys(cp, CELL_KEYS, "cell")
        return cp

    def ergodic_params(self):
        ep = self.doc.get("ergodic", {})
        _check_keys(ep, ERGODIC_KEYS, "ergodic")
        return ep

    def sweep_config(self, seeds=None, threads=1, timing=False):
        gp = self.grid_params()
        doc = self.doc
        eps = self.eps_list()
        K = int(gp.get("K", 8))
        if "h" in gp:
            K_from_h = eps[-1] / float(gp["h"])
            if abs(K_from_h - round(K_from_h)) > 1e-9:
                raise ConfigError("grid.h must divide the smallest eps")
            K = int(round(K_from_h))
        cp = self.cell_params()
        return SweepConfig(
            model=self.model(), eps=eps, source=self.source(), m=_num(doc, "m", "config", default=1.0, positive=True),
            p=_num(doc, "p", "config", default=2.0), R_dom=float(gp.get("R_dom", 2.0)), K=K,
            r_near=gp.get("r_near"), seeds=seeds if seeds is not None else tuple(doc.get("seeds", [0])),
            tol=float(doc.get("tol", 1e-8)), nl_tol=float(doc.get("nl_tol", 1e-6)),
            method=doc.get("method", "auto"), naive=bool(doc.get("naive", False)),
            cell_N=cp.get("N"), threads=threads, timing=timing, echo=self.resolved(),
        )


def _check_field_keys(spec, where):
    if isinstance(spec, (int, float, list)) and not isinstance(spec, bool):
        return
    if not isinstance(spec, dict):
        raise ConfigError(f"{where} must be a number, list or generator mapping")
    tags = [t for t in FIELD_TAGS if t in spec]
    if len(tags) != 1:
        raise ConfigError(f"{where} needs exactly one of: {', '.join(FIELD_TAGS)}")
    _check_keys(spec, FIELD_TAGS[tags[0]], where)


def _check_rule_keys(spec, rules, where):
    if not isinstance(spec, dict) or spec.get("rule") not in rules:
        raise ConfigError(f"{where}.rule must be one of {sorted(rules)}")
    _check_keys(spec, rules[spec["rule"]], where)


def _check_pair_keys(spec, where):
    if isinstance(spec, dict) and ("table" in spec or "file" in spec):
        _check_keys(spec, {"table"} if "table" in spec else {"file"}, where)
        return
    _check_rule_keys(spec, PAIR_RULES, where)
    if spec["rule"] == "product":
        _check_field_keys(spec.get("f"), f"{where}.f")
    if spec["rule"] == "lam_mu":
        _check_field_keys(spec.get("lambda"), f"{where}.lambda")
        _check_field_keys(spec.get("mu"), f"{where}.mu")


def _size_error(got, want):
    raise ConfigError(f"source file has {got} values, grid has {want} cells")
