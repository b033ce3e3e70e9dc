from fractions import Fraction

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from cfquant import scm
from cfquant.errors import DomainError
from cfquant.quantile import (
    QuantileNet,
    QuantileTrainConfig,
    Scaler,
    empirical_quantile,
    encode_tau,
    linear_quantile_baseline,
    pinball_loss,
    train_quantile_net,
)


@pytest.mark.parametrize("tau, xi, expected", [(0.7, 1.0, 0.7), (0.7, -1.0, 0.3), (0.5, -2.0, 1.0)])
def test_pinball_examples(tau, xi, expected):
    assert pinball_loss(tau, xi) == pytest.approx(expected)


def test_pinball_rejects_tau_outside_unit_interval():
    with pytest.raises(DomainError):
        pinball_loss(1.1, 0.0)
    with pytest.raises(DomainError):
        pinball_loss(-0.01, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(-1e6, 1e6), st.floats(0, 1e3))
def test_pinball_positive_and_positively_homogeneous(tau, xi, k):
    assert pinball_loss(tau, xi) >= 0
    assert pinball_loss(tau, k * xi) == pytest.approx(k * pinball_loss(tau, xi), rel=1e-12, abs=1e-9)


def test_empirical_quantile_examples():
    assert empirical_quantile([1, 2, 3, 4, 5], 0.5) == 3
    for tau in (0.01, 0.5, 0.99):
        assert empirical_quantile([1, 1, 1], tau) == 1
    draws = np.random.Generator(np.random.Philox(0)).standard_normal(1_000_000)
    assert empirical_quantile(draws, norm.cdf(0.5)) == pytest.approx(0.5, abs=0.005)
    with pytest.raises(DomainError):
        empirical_quantile([], 0.5)


def test_empirical_quantile_exact_ceiling():
    # 0.7 * 10 is 7.000000000000001 in floating point; the exact ceiling is 7
    assert empirical_quantile(np.arange(1, 11), 0.7) == 7


def _scan(values, tau):
    vs = [Fraction(v) for v in values]
    t = Fraction(tau)
    obj = {mu: sum(t * (v - mu) if v >= mu else (t - 1) * (v - mu) for v in vs) for mu in vs}
    best = min(obj.values())
    return float(min(mu for mu, o in obj.items() if o == best))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-6, 6) | st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20),
       st.floats(0.001, 0.999))
def test_empirical_quantile_minimises_pinball_objective(values, tau):
    assert empirical_quantile(values, tau) == _scan(values, tau)


def test_scaler_round_trip_and_robust_scale():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(200_000)
    sc = Scaler.fit(rng.random(10), rng.random((10, 2)), y)
    assert sc.y_scale == pytest.approx(1.0, abs=0.01)
    assert np.allclose(sc.y_inv(sc.y(y[:5])), y[:5])
    back = Scaler.from_dict(sc.to_dict())
    assert np.array_equal(back.z_mean, sc.z_mean) and back.y_scale == sc.y_scale
    flat = Scaler.fit(np.zeros(5), np.zeros(5), np.full(5, 3.0))
    assert flat.y_scale == 1.0 and flat.x_std == 1.0


def test_encode_tau_is_the_logit_with_its_derivative():
    t = np.array([0.1, 0.5, 0.9])
    f, d = encode_tau(t)
    assert np.allclose(f, np.log(t / (1 - t))) and np.allclose(d, 1 / (t * (1 - t)))
    f, d = encode_tau(np.array([0.0, 1.0]))
    assert np.all(np.isfinite(f)) and np.all(d == 0)
    f, d = encode_tau(t, "raw")
    assert np.array_equal(f, t) and np.all(d == 1)


def test_quantile_net_rejects_tau_outside_unit_interval():
    ds = scm.sample_dataset(scm.scenario_spec("linear"), 20, 0)
    g = QuantileNet.build(Scaler.fit(ds.x, ds.z, ds.y), 1, hidden_dim=8)
    with pytest.raises(DomainError):
        g.predict(ds.x, ds.z, 1.5)


def test_quantile_net_tau_gradient_matches_finite_differences():
    ds = scm.sample_dataset(scm.scenario_spec("additive_sin"), 6, 0)
    g = QuantileNet.build(Scaler.fit(ds.x, ds.z, ds.y), 1, hidden_dim=10, seed=3)
    tau = np.linspace(0.2, 0.8, 6)
    g.forward_std(ds.x, ds.z, tau)
    dtau = g.backward_std(np.ones(6), accumulate=False)
    h = 1e-6
    num = (g.forward_std(ds.x, ds.z, tau + h, cache=False) - g.forward_std(ds.x, ds.z, tau - h, cache=False)) / (2 * h)
    assert np.allclose(dtau, num, rtol=1e-6, atol=1e-8)


def test_median_net_tracks_additive_sin_curve():
    spec = scm.scenario_spec("additive_sin")
    ds = scm.sample_dataset(spec, 100_000, 0)
    g = train_quantile_net(ds, QuantileTrainConfig(), seed=0)
    grid = np.linspace(0, 1, 50)
    z = np.full((50, 1), 0.5)
    pred = g.predict(grid, z, 0.5)
    assert np.sqrt(np.mean((pred - np.sin(2 * np.pi * grid + 0.5)) ** 2)) <= 0.05


def test_constant_target_gives_constant_quantiles():
    spec = scm.family_spec("custom", custom=lambda x, z, u: np.full(x.shape, 2.0))
    ds = scm.sample_dataset(spec, 2000, 0)
    g = train_quantile_net(ds, QuantileTrainConfig(steps=1500, batch_size=256), seed=0)
    for tau in np.linspace(0.05, 0.95, 10):
        assert np.mean(np.abs(g.predict(ds.x, ds.z, tau) - 2.0)) <= 1e-2


def test_linear_baseline_matches_statsmodels_quantreg():
    spec = scm.scenario_spec("linear")
    ds = scm.sample_dataset(spec, 20_000, 1)
    X = sm.add_constant(np.column_stack([ds.x, ds.z]))
    for tau in (0.1, 0.5, 0.9):
        ref = sm.QuantReg(ds.y, X).fit(q=tau).params
        a, b, c = linear_quantile_baseline(ds, tau)
        assert a == pytest.approx(ref[1], abs=0.01)
        assert b[0] == pytest.approx(ref[2], abs=0.01)
        assert c == pytest.approx(ref[0], abs=0.01)


def test_linear_baseline_recovers_true_coefficients():
    ds = scm.sample_dataset(scm.scenario_spec("linear"), 100_000, 2)
    a, b, c = linear_quantile_baseline(ds, 0.5)
    assert a == pytest.approx(1.0, abs=0.05) and b[0] == pytest.approx(1.0, abs=0.05)
    assert c == pytest.approx(0.0, abs=0.05)
    _, _, c = linear_quantile_baseline(ds, 0.691)
    assert c == pytest.approx(norm.ppf(0.691), abs=0.05)


def test_linear_baseline_cannot_fit_additive_sin():
    spec = scm.scenario_spec("additive_sin")
    ds = scm.sample_dataset(spec, 20_000, 0)
    a, b, c = linear_quantile_baseline(ds, 0.5)
    grid = np.linspace(0, 1, 50)
    lin = a * grid + b[0] * 0.5 + c
    assert np.sqrt(np.mean((lin - np.sin(2 * np.pi * grid + 0.5)) ** 2)) > 0.3
