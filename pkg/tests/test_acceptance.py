"""Acceptance criteria 1-8, one recorded pass/fail line each.

Models are trained with the desk preset frozen in ``cfquant.eval`` and shared
through the session cache, so the trajectories criterion reuses the ten
quantile-recovery models per family. A full run takes roughly an hour on a
single core.
"""
import filecmp
import os
from fractions import Fraction

import numpy as np
import pytest

from cfquant import cli, scm
from cfquant.eval import (
    ACCEPTANCE,
    DESK_PRESET,
    confounder_study,
    ge_robustness_study,
    monotonicity_study,
    quantile_recovery_study,
    sample_efficiency_sweep,
    trajectories_study,
)
from cfquant.nn import Mlp, gradient_check, squared_loss
from cfquant.quantile import (
    QuantileNet,
    QuantileTrainConfig,
    Scaler,
    coverage,
    empirical_quantile,
    train_quantile_net,
)
from cfquant.bilevel import BilevelConfig, QuantileEstimator


def _details(result):
    return "; ".join(f"{'ok' if c.passed else 'FAILED'} {c.name} ({c.detail})" for c in result.checks)


def test_criterion_1_quantile_recovery(model_cache, record_criterion):
    res = quantile_recovery_study(cache=model_cache)
    ok = record_criterion(1, "quantile recovery, five families x 10 seeds", res.passed, _details(res))
    assert ok, res.summary()


def test_criterion_2_trajectories(model_cache, record_criterion):
    res = trajectories_study(cache=model_cache)
    ok = record_criterion(2, "counterfactual trajectories and identity intervention", res.passed, _details(res))
    assert ok, res.summary()


def test_criterion_3_ge_robustness(model_cache, record_criterion):
    res = ge_robustness_study(cache=model_cache)
    ok = record_criterion(3, "g(E) robustness, identity and clip", res.passed, _details(res))
    assert ok, res.summary()


def test_criterion_4_monotonicity(model_cache, record_criterion):
    res = monotonicity_study(cache=model_cache)
    ok = record_criterion(4, "monotonicity violation is detectable", res.passed, _details(res))
    assert ok, res.summary()


def test_criterion_5_confounders(model_cache, record_criterion):
    res = confounder_study(cache=model_cache)
    ok = record_criterion(5, "latent confounder ordering", res.passed, _details(res))
    assert ok, res.summary()


def test_criterion_6_sample_efficiency(model_cache, record_criterion):
    res = sample_efficiency_sweep(cache=model_cache)
    ok = record_criterion(6, "sample efficiency trend", res.passed, _details(res))
    assert ok, res.summary()


# ----------------------------------------------------------------------
# criterion 7: oracle suites
# ----------------------------------------------------------------------

def _exhaustive_min(values, tau):
    """Smallest data point minimising sum l_tau(v - mu), in exact arithmetic."""
    vs = [Fraction(v) for v in values]
    t = Fraction(tau)

    def obj(mu):
        return sum(t * (v - mu) if v >= mu else (t - 1) * (v - mu) for v in vs)

    scores = [(obj(mu), mu) for mu in vs]
    best = min(s for s, _ in scores)
    return float(min(mu for s, mu in scores if s == best))


def _corpus(n_lists=3000, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n_lists):
        k = int(rng.integers(1, 21))
        vals = rng.integers(-5, 6, size=k).astype(float) if i % 2 else rng.standard_normal(k)
        tau = float(rng.choice([0.1, 0.25, 0.5, 0.7, 0.75, 0.9])) if i % 3 == 0 else float(rng.uniform(0.001, 0.999))
        yield vals, tau


def _deployed_architectures():
    """Every network shape the package trains: desk and full-size g and h, plus the standalone g."""
    scaler = Scaler.fit(np.linspace(0, 1, 10), np.linspace(0, 1, 10), np.linspace(0, 1, 10))
    bin_scaler = Scaler.fit(np.array([0.0, 1.0] * 5), np.linspace(0, 1, 10), np.linspace(0, 1, 10), x_binary=True)
    out = {}
    for label, cfg in (("desk", DESK_PRESET), ("full", BilevelConfig())):
        for sc_label, sc in (("", scaler), ("binary-x ", bin_scaler)):
            g = QuantileNet.build(sc, 1, cfg.hidden_dim, cfg.n_residual_blocks, seed=3)
            h = QuantileEstimator.build(sc, 1, cfg.hidden_dim, cfg.n_residual_blocks, seed=4)
            for k, net in enumerate(g.net.nets):
                out[f"{label} {sc_label}g route {k}"] = net
            for k, net in enumerate(h.net.nets):
                out[f"{label} {sc_label}h route {k}"] = net
    qc = QuantileTrainConfig()
    out["standalone g"] = QuantileNet.build(scaler, 1, qc.hidden_dim, qc.n_residual_blocks, seed=5).net.nets[0]
    return out


def test_criterion_7_oracle_suites(record_criterion):
    # exhaustive-scan agreement
    mismatches = 0
    n_lists = 0
    for vals, tau in _corpus():
        n_lists += 1
        if empirical_quantile(vals, tau) != _exhaustive_min(vals, tau):
            mismatches += 1
    scan_ok = mismatches == 0

    # gradient checks
    worst, worst_name = 0.0, ""
    rng = np.random.default_rng(1)
    for name, net in _deployed_architectures().items():
        batch = rng.standard_normal((16, net.config.input_dim))
        target = rng.standard_normal((16, net.config.output_dim))
        err = gradient_check(net, squared_loss(target), batch, n_check=150, seed=2)
        if err > worst:
            worst, worst_name = err, name
    grad_ok = worst < 1e-4

    # held-out calibration of the standalone quantile net
    spec = scm.scenario_spec("linear")
    train = scm.sample_dataset(spec, 100_000, seed=11)
    test = scm.sample_dataset(spec, 20_000, seed=12)
    g = train_quantile_net(train, QuantileTrainConfig(), seed=0)
    taus = np.round(np.arange(0.1, 0.91, 0.1), 10)
    cal = float(np.max(np.abs(coverage(g, test, taus) - taus)))
    cal_ok = cal <= 0.02

    detail = (f"empirical_quantile vs exhaustive scan: {mismatches} mismatches over {n_lists} lists; "
              f"max gradient-check error {worst:.2e} ({worst_name}); max calibration error {cal:.4f}")
    ok = record_criterion(7, "oracle suites", scan_ok and grad_ok and cal_ok, detail)
    assert ok, detail


# ----------------------------------------------------------------------
# criterion 8: determinism of every command
# ----------------------------------------------------------------------

_SMALL_TRAIN = """
[train]
inner_steps = 3
interest_batch = 16
per_tau_batch = 8
upper_batch = 32
outer_steps = 6
hidden_dim = 16
n_residual_blocks = 1
eval_rows = 128

[acceptance]
n_ge = 2000
ge_seeds = 1
grid_points = 10
"""


def _run_all(root):
    os.makedirs(root)
    cfg = os.path.join(root, "small.ini")
    with open(cfg, "w") as fh:
        fh.write(_SMALL_TRAIN)
    data = os.path.join(root, "data.csv")
    model = os.path.join(root, "model.json")
    query = os.path.join(root, "query.csv")
    codes = [
        cli.main(["gen", "--scenario", "linear", "--n", "3000", "--seed", "7", "--out", data]),
        cli.main(["train", "--config", cfg, "--data", data, "--scenario", "linear", "--seed", "1", "--out", model]),
    ]
    with open(query, "w") as fh:
        fh.write("x,z0,y,x_prime\n0.5,0.5,1.5,0.0\n0.5,0.5,1.5,1.0\n0.2,0.7,0.4,0.9\n")
    codes.append(cli.main(["infer", "--model", model, "--query", query, "--out", os.path.join(root, "pred.csv")]))
    codes.append(cli.main(["eval", "--config", cfg, "--study", "ge-robustness", "--out", os.path.join(root, "eval")]))
    return codes


def _all_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def test_criterion_8_determinism(tmp_path, record_criterion, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    codes_a, codes_b = _run_all(a), _run_all(b)
    capsys.readouterr()
    files = _all_files(a)
    same_set = files == _all_files(b)
    differ = [f for f in files if not filecmp.cmp(os.path.join(a, f), os.path.join(b, f), shallow=False)]
    # eval may legitimately fail its acceptance checks at this toy scale (exit 1); both runs must agree
    codes_ok = codes_a == codes_b and all(c in (0, 1) for c in codes_a)
    detail = f"{len(files)} files compared, {len(differ)} differ {differ}; exit codes {codes_a} / {codes_b}"
    ok = record_criterion(8, "bit-identical outputs on repeat", same_set and not differ and codes_ok, detail)
    assert ok, detail
