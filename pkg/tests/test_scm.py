import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from cfquant import scm
from cfquant.errors import ConfigurationError, DomainError, OracleUnavailableError


def test_linear_interest_sample_and_its_quantile():
    spec = scm.scenario_spec("linear")
    s = scm.interest_sample(spec)
    assert s.y == pytest.approx(1.5)
    assert scm.true_quantile(spec, s) == pytest.approx(norm.cdf(0.5), abs=1e-12)
    assert scm.true_quantile(spec, s) == pytest.approx(0.691, abs=5e-4)


def test_linear_counterfactual_is_a_shift():
    spec = scm.scenario_spec("linear")
    s = scm.interest_sample(spec)
    assert scm.true_counterfactual(spec, s, 1.0) == pytest.approx(2.0)
    assert np.allclose(scm.true_counterfactual(spec, s, np.array([0.0, 0.25])), [1.0, 1.25])


@pytest.mark.parametrize("family, expected", [
    ("additive_sin", np.sin(2 * np.pi * 0.3 + 0.6) + 0.2),
    ("multiplicative", np.exp(0.3 - 0.6 + 0.5) * 0.2),
    ("post_nonlinear", np.exp(np.sin(np.pi * 0.3 + 0.6) + 0.2)),
    ("heteroscedastic", np.exp(-1.5 + 0.6) + np.exp(0.3 + 0.6 - 0.5) * 0.2),
    ("fig2", 0.25 * (0.6 + np.sin(2 * np.pi * 0.3) * 0.2 + 0.4)),
    ("dose_cont", 0.6 * np.exp(-0.3) + 0.5 * np.sin(np.pi * 0.3) + 0.06),
])
def test_structural_equations_by_hand(family, expected):
    spec = scm.family_spec(family)
    y = scm.structural(spec, np.array([0.3]), np.array([[0.6]]), np.array([0.2]))
    assert y[0] == pytest.approx(expected, rel=1e-14)


def test_interest_quantile_is_phi_half_for_every_gaussian_family():
    for fam in scm.FIVE_FAMILIES:
        spec = scm.scenario_spec(fam)
        assert scm.true_quantile(spec, scm.interest_sample(spec)) == pytest.approx(norm.cdf(0.5))


def test_uniform_noise_interest_quantile_is_half():
    spec = scm.scenario_spec("linear_uniform")
    assert scm.true_quantile(spec, scm.interest_sample(spec)) == pytest.approx(0.5)


def test_fig2_clip_interest_value():
    # the sample's clipped noise sits inside [-0.5, 1], so both transforms give y = 0.375
    for name in ("fig2_identity", "fig2_clip"):
        spec = scm.scenario_spec(name)
        assert scm.interest_sample(spec).y == pytest.approx(0.375)


def test_sampling_is_deterministic_and_seed_sensitive():
    spec = scm.scenario_spec("post_nonlinear")
    a, b = scm.sample_dataset(spec, 500, 3), scm.sample_dataset(spec, 500, 3)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != scm.sample_dataset(spec, 500, 4).to_csv()


def test_dataset_arrays_are_read_only():
    ds = scm.sample_dataset(scm.scenario_spec("linear"), 10, 0)
    with pytest.raises(ValueError):
        ds.y[0] = 1.0


def test_supports():
    cont = scm.sample_dataset(scm.scenario_spec("dose_cont"), 2000, 0)
    assert np.allclose(cont.x * 10, np.round(cont.x * 10)) and cont.x.min() >= 0 and cont.x.max() <= 2
    assert cont.z.min() >= 0.2 and cont.z.max() <= 0.8
    dis = scm.sample_dataset(scm.scenario_spec("dose_dis"), 2000, 0)
    assert set(np.unique(dis.x)) == {0.0, 1.0}
    mono = scm.sample_dataset(scm.scenario_spec("mono_a"), 2000, 0)
    assert mono.x.min() >= -3 and mono.x.max() <= 3 and mono.x.min() < -2.9
    assert np.all(np.abs(mono.e) <= 1)


def test_csv_round_trip(tmp_path):
    ds = scm.sample_dataset(scm.scenario_spec("linear_c_xy"), 50, 1)
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    back = scm.read_dataset_csv(path, spec=ds.spec)
    for name in ("x", "z", "y", "e", "c"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    ds.to_csv(tmp_path / "pub.csv", hidden=False)
    assert scm.read_dataset_csv(tmp_path / "pub.csv").e is None


def test_confounder_placement():
    base = scm.sample_dataset(scm.scenario_spec("linear"), 4000, 0)
    xz = scm.sample_dataset(scm.scenario_spec("linear_c_xz"), 4000, 0)
    zy = scm.sample_dataset(scm.scenario_spec("linear_c_zy"), 4000, 0)
    xy = scm.sample_dataset(scm.scenario_spec("linear_c_xy"), 4000, 0)
    # same x, z, e draws; the confounder moves only its two children
    assert np.array_equal(zy.x, base.x) and np.allclose(zy.z[:, 0], base.z[:, 0] + zy.c)
    assert np.allclose(zy.y, zy.x + zy.z[:, 0] + zy.e + zy.c)
    assert np.array_equal(xy.z, base.z) and np.allclose(xy.y, xy.x + xy.z[:, 0] + xy.e + xy.c)
    assert np.allclose(xz.y, xz.x + xz.z[:, 0] + xz.e)
    assert np.corrcoef(xy.x, xy.c)[0, 1] > 0.3
    with pytest.raises(ConfigurationError):
        scm.make_confounded(scm.scenario_spec("linear_c_xy"), "c_to_xz")


def test_confounded_counterfactual_needs_c():
    spec = scm.scenario_spec("linear_c_xy")
    s = scm.sample_dataset(spec, 1, 0)[0]
    assert scm.true_counterfactual(spec, s, 1.0) == pytest.approx(1.0 + s.z[0] + s.e + s.c)
    with pytest.raises(OracleUnavailableError):
        scm.true_counterfactual(spec, scm.Sample(x=0.5, z=np.array([0.5]), y=1.0, e=0.1), 1.0)
    with pytest.raises(OracleUnavailableError):
        scm.true_quantile(spec, s)


def test_counterfactual_at_factual_x_reproduces_y():
    for name in scm.SCENARIOS:
        spec = scm.scenario_spec(name)
        ds = scm.sample_dataset(spec, 20, 5)
        for s in ds.samples():
            assert scm.true_counterfactual(spec, s, s.x) == pytest.approx(s.y, rel=1e-12, abs=1e-12)


def test_non_monotone_family_has_no_quantile_oracle():
    spec = scm.scenario_spec("mono_e")
    with pytest.raises(OracleUnavailableError):
        scm.true_quantile(spec, scm.interest_sample(spec))


@pytest.mark.parametrize("name", ["linear", "fig2_clip", "mono_a", "mono_b", "mono_c", "linear_uniform"])
@settings(max_examples=25, deadline=None)
@given(tau=st.floats(0.02, 0.98))
def test_g_quantile_inverts_g_cdf(name, tau):
    spec = scm.scenario_spec(name)
    u = scm.g_quantile(spec, tau)
    assert scm.g_cdf(spec, u) >= tau - 1e-6
    if spec.g_transform != "clip" or scm.g_cdf(spec, u) < 1.0:
        assert scm.g_cdf(spec, u - 1e-3) <= tau + 1e-6


@pytest.mark.parametrize("name", ["mono_a", "mono_b", "mono_c"])
def test_analytic_g_cdf_matches_sampling(name):
    spec = scm.scenario_spec(name)
    e = scm._sample_e(spec, np.random.Generator(np.random.Philox(1)), 200_000)
    u = scm.g_of_e(spec, e)
    for q in (0.1, 0.5, 0.9):
        t = np.quantile(u, q)
        assert scm.g_cdf(spec, t) == pytest.approx(q, abs=0.005)


@pytest.mark.parametrize("name", ["linear", "post_nonlinear", "mono_b"])
def test_closed_form_conditional_quantile_matches_brute_force(name):
    spec = scm.scenario_spec(name)
    rng = np.random.Generator(np.random.Philox(2))
    e = scm._sample_e(spec, rng, 400_000)
    y = scm.structural(spec, np.full(e.size, 0.4), np.full((e.size, 1), 0.7), scm.g_of_e(spec, e))
    for tau in (0.2, 0.691, 0.9):
        oracle = scm.conditional_quantile_oracle(spec, 0.4, 0.7, tau)
        assert oracle == pytest.approx(np.quantile(y, tau), rel=0.01, abs=0.01)


def test_brute_force_oracle_for_non_monotone_family():
    spec = scm.scenario_spec("mono_e")
    q1 = scm.conditional_quantile_oracle(spec, 1.0, 0.5, 0.3)
    q2 = scm.conditional_quantile_oracle(spec, 1.0, 0.5, 0.7)
    assert q1 < q2


def test_oracle_domain_errors():
    spec = scm.scenario_spec("linear")
    with pytest.raises(DomainError):
        scm.conditional_quantile_oracle(spec, 0.5, 0.5, 1.0)
    with pytest.raises(OracleUnavailableError):
        scm.conditional_quantile_oracle(scm.scenario_spec("linear_c_zy"), 0.5, 0.5, 0.5)
    with pytest.raises(DomainError):
        scm.sample_dataset(spec, 0, 0)


def test_mono_e_direction_flips_with_x():
    spec = scm.scenario_spec("mono_e")
    z = np.full((2, 1), 0.5)
    lo, hi = scm.g_of_e(spec, np.array([-0.9, 0.9]))
    u = np.sort([lo, hi])
    pos = scm.structural(spec, np.array([2.0, 2.0]), z, u)
    neg = scm.structural(spec, np.array([-2.0, -2.0]), z, u)
    assert pos[0] < pos[1] and neg[0] > neg[1]


def test_scenario_names_and_config_round_trip():
    assert scm.scenario_spec("fig2-clip") == scm.scenario_spec("fig2_clip")
    with pytest.raises(ConfigurationError):
        scm.scenario_spec("nope")
    spec = scm.scenario_spec("dose_cont")
    assert scm.ScmSpec.from_config(spec.to_config()) == spec


def test_invalid_specs():
    with pytest.raises(ConfigurationError):
        scm.family_spec("mono_a", g_transform="identity")
    with pytest.raises(ConfigurationError):
        scm.family_spec("custom")


def test_custom_family_and_empirical_oracle():
    spec = scm.family_spec("custom", custom=lambda x, z, u: 2 * x + u)
    ds = scm.sample_dataset(spec, 100, 0)
    assert np.allclose(ds.y, 2 * ds.x + ds.e)
    with pytest.raises(OracleUnavailableError):
        scm.true_quantile(spec, ds[0])
