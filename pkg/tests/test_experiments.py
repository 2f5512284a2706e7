import csv
import io
import json

import numpy as np
import pytest

from levyhom.errors import ConfigError
from levyhom.experiments import (
    CSV_COLUMNS,
    SweepConfig,
    bump,
    ergodic_average_check,
    estimate_rate,
    gamma_values,
    run_sweep,
    sweep_csv,
    sweep_json,
    write_report,
)
from levyhom.fields import RandomFieldSpec, make_torus_field
from levyhom.kernels import ConstantKernel, MacroModulation, NonSymKernel, P1Kernel, Q1Kernel, Q2Kernel, make_pair_table

TWO_PI = 2 * np.pi


def p1_model():
    return P1Kernel(make_torus_field(1, 2, [1.0, 1 / 3]), make_torus_field(1, 2, [1.0, 3.0]), 0.5, 3.0)


def small_cfg(model, eps=(0.5, 0.25), **kw):
    kw.setdefault("R_dom", 1.0)
    return SweepConfig(model=model, eps=list(eps), **kw)


def test_bump_shape():
    f = bump(1.0)
    assert f(np.array([[0.0]]))[0] == pytest.approx(np.exp(-1))
    assert f(np.array([[1.0], [1.5]])).tolist() == [0.0, 0.0]


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(p1_model(), eps=(0.25, 0.5))
    with pytest.raises(ConfigError):
        small_cfg(p1_model(), K=4)
    with pytest.raises(ConfigError):
        small_cfg(p1_model(), m=0.0)
    assert small_cfg(p1_model(), eps=(0.5, 0.25), K=8).h == 0.25 / 8


def test_constant_kernel_sweep_exact():
    rep = run_sweep(small_cfg(ConstantKernel(1.3, 0.5, 2.0), tol=1e-12))
    assert all(e < 1e-6 for e in rep.errors())
    assert rep.lambda_eff == 1.3


def test_constant_kernel_gamma_values():
    rep = run_sweep(small_cfg(ConstantKernel(1.3, 0.5, 2.0), tol=1e-12))
    for r in rep.records:
        assert r.gamma_value == pytest.approx(rep.gamma_eff, rel=1e-9)


def test_gamma_values_p1_only():
    with pytest.raises(ConfigError):
        gamma_values(small_cfg(ConstantKernel(1.3, 0.5, 2.0)))


def test_gamma_values_minimality():
    vals = gamma_values(small_cfg(p1_model(), eps=(0.5, 0.25, 0.125), R_dom=2.0))
    for fe, fu0 in zip(vals["F_eps"], vals["F_eps_at_u0"]):
        assert fe <= fu0
    gaps = [abs(fe - vals["F_eff"]) for fe in vals["F_eps"]]
    assert gaps[0] > gaps[1] > gaps[2]


@pytest.mark.parametrize("power,slope", [(1.0, 1.0), (0.5, 0.5), (0.0, 0.0)])
def test_estimate_rate(power, slope):
    eps = np.array([0.5, 0.25, 0.125, 0.0625])
    assert estimate_rate(3.0 * eps**power, eps) == pytest.approx(slope, abs=0.01)


def test_estimate_rate_input_checks():
    with pytest.raises(ConfigError):
        estimate_rate([1.0, 0.5], [1.0, 0.5])
    with pytest.raises(ConfigError):
        estimate_rate([1.0, 0.0, 0.5], [1.0, 0.5, 0.25])


def test_ergodic_constant_zero():
    res = ergodic_average_check(ConstantKernel(1.7, 0.5, 2.0), (0, 1, 0, 1), [0.5, 0.125], range(10))
    assert all(d == 0 for d in res["mean_deviation"])


def test_ergodic_requires_ten_seeds():
    with pytest.raises(ConfigError):
        ergodic_average_check(ConstantKernel(1.7, 0.5, 2.0), (0, 1, 0, 1), [0.5], range(5))


def test_ergodic_q1_decreasing():
    q1 = Q1Kernel(RandomFieldSpec("checkerboard", states=[1.0, 3.0], seed=2),
                  RandomFieldSpec("checkerboard", states=[1.0, 3.0], seed=5), 0.5, 9.0)
    res = ergodic_average_check(q1, (0, 1, 0, 1), [1 / 2, 1 / 8, 1 / 32], range(10))
    d = res["mean_deviation"]
    assert d[0] > d[1] > d[2]
    assert res["limit"] == 4.0


def test_ergodic_q2_product_limit():
    g = lambda w: 1.5 + 0.5 * np.cos(TWO_PI * w[..., 1])
    q2 = Q2Kernel(MacroModulation(), lambda w1, w2: g(w1) * g(w2), 0.5, 4.0, seed=3)
    res = ergodic_average_check(q2, (0.0, 1.0, 0.5, 1.5), [1 / 4, 1 / 16, 1 / 64], range(10))
    assert res["limit"] == pytest.approx(1.5**2, rel=1e-12)
    d = res["mean_deviation"]
    assert d[0] > d[1] > d[2] and d[2] < 0.01


def test_q1_sweep_cv_and_seeds():
    q1 = Q1Kernel(RandomFieldSpec("checkerboard", states=[1.0, 1 / 3], seed=7),
                  RandomFieldSpec("checkerboard", states=[1.0, 3.0], seed=7), 0.5, 3.0)
    rep = run_sweep(small_cfg(q1, eps=(0.25, 0.0625), R_dom=2.0, seeds=range(10)))
    assert sorted(rep.by_seed()) == list(range(10))
    cv = rep.cv_by_eps
    assert cv[0.0625] < 1 and cv[0.0625] < cv[0.25]


def test_nonsym_energy_identity_and_bound():
    t = make_pair_table(1, 64, lambda a, b: 2 + 0.5 * np.sin(TWO_PI * a[..., 0]) + 0.25 * np.sin(TWO_PI * b[..., 0]))
    rep = run_sweep(small_cfg(NonSymKernel(t, 0.5, 4.0), eps=(0.5, 0.25), tol=1e-11, cell_N=64))
    for r in rep.records:
        assert r.resolvent_bound_ok
        assert r.energy["rel_defect"] < 1e-3
        assert r.energy["adjoint_residual"] < 1e-6


def test_threads_match_serial():
    a = run_sweep(small_cfg(p1_model(), threads=1))
    b = run_sweep(small_cfg(p1_model(), threads=3))
    assert sweep_csv(a) == sweep_csv(b)


def test_report_writers(tmp_path):
    rep = run_sweep(small_cfg(p1_model(), naive=True))
    text = sweep_csv(rep)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == CSV_COLUMNS and len(rows) == 3
    doc = json.loads(sweep_json(rep, echo={"case": "p1"}))
    assert doc["config"] == {"case": "p1"} and doc["naive_lambda"] == pytest.approx(4 / 3)
    c1, j1 = write_report(rep, tmp_path / "a")
    c2, j2 = write_report(run_sweep(small_cfg(p1_model(), naive=True)), tmp_path / "b")
    assert c1.read_bytes() == c2.read_bytes() and j1.read_bytes() == j2.read_bytes()
    assert all(r.wall_ms == 0.0 for r in rep.records)
