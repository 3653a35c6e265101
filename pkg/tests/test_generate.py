import math

import numpy as np
import pytest

from entroflux.gaussmix import GaussianMixture, pushforward
from entroflux.generate import (SamplerConfig, SamplingAbort, exact_eps, forward_grid,
                                initial_law_kl, initial_samples, pf_ode_sample, read_samples_csv,
                                reverse_sde_sample, write_samples_csv)
from entroflux.process import mu_sigma, sl, vp

N21 = GaussianMixture.gaussian([2.0], 1.0)
N01 = GaussianMixture.gaussian([0.0], 1.0)


def _zero(x, s):
    return np.zeros_like(np.asarray(x, dtype=float))


def _moments_ok(x, mean, var, k=3.0, bias=0.0):
    n = len(x)
    m_se = math.sqrt(var / n)
    v_se = var * math.sqrt(2 / (n - 1))
    return abs(x.mean() - mean) < k * m_se + bias and abs(x.var(ddof=1) - var) < k * v_se + bias


def test_config_validation():
    for bad in (dict(steps=1), dict(scheme="RK4"), dict(init="x"), dict(data_var=0.0)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_forward_grids():
    g = forward_grid(vp(), 10)
    assert g[0] == vp().s_lo and g[-1] == 1.0 and len(g) == 11
    g = forward_grid(sl(0.1), 10)
    np.testing.assert_allclose(np.diff(np.log(1 - g)), np.diff(np.log(1 - g))[0], rtol=1e-10)
    assert g[-1] == pytest.approx(sl(0.1).s_hi)


def test_initial_laws():
    rng = np.random.default_rng(0)
    x = initial_samples(sl(0.1), SamplerConfig(), 100_000, 1, rng)
    np.testing.assert_allclose(x.std(), 0.1, rtol=0.01)
    spec = vp(2.0, 2.0)
    mu, sig = mu_sigma(1.0, spec)
    x = initial_samples(spec, SamplerConfig(init="KernelGaussian", data_var=4.0), 100_000, 1, rng)
    np.testing.assert_allclose(x.var(), float(mu**2 * 4 + sig**2), rtol=0.02)


def test_initial_law_kl_closed_form():
    # beta = 2, T = 1: P_0 = N(2/e, 1) against the QID N(0, 1)
    spec = vp(2.0, 2.0)
    est = initial_law_kl(N21, spec, 100_000, np.random.default_rng(11))
    assert abs(est.value - 2 * math.exp(-2)) < 3 * est.std_err
    stationary = initial_law_kl(N01, spec, 1000, np.random.default_rng(12))
    assert abs(stationary.value) < 1e-12


def test_reverse_sde_exact_eps_recovers_data():
    spec = vp()
    x = reverse_sde_sample(exact_eps(N21, spec), spec, SamplerConfig(steps=500), 100_000,
                           np.random.default_rng(1), dim=1)[:, 0]
    assert _moments_ok(x, 2.0, 1.0)


def test_zero_eps_keeps_qid_stationary():
    spec = vp()
    x = reverse_sde_sample(_zero, spec, SamplerConfig(steps=200), 100_000,
                           np.random.default_rng(2), dim=1)[:, 0]
    # Euler-Maruyama on the OU step inflates the variance by O(beta h)
    assert _moments_ok(x, 0.0, 1.0, bias=0.02)


def test_euler_maruyama_weak_order_one():
    spec = vp(2.0, 2.0)
    p0 = pushforward(N21, spec.s_hi, spec)
    errs = []
    for steps in (10, 20, 40):
        rng = np.random.default_rng(3)
        x0 = p0.sample(400_000, rng)
        x = reverse_sde_sample(exact_eps(N21, spec), spec, SamplerConfig(steps=steps), len(x0), rng,
                               x_init=x0)
        errs.append(abs(x.mean() - 2.0))
    slopes = np.diff(np.log(errs)) / np.diff(np.log([0.1, 0.05, 0.025]))
    assert np.all((slopes > 0.7) & (slopes < 1.3)), slopes


def test_pf_ode_qid_trajectories_constant():
    spec = vp()
    x0 = np.random.default_rng(4).standard_normal((50, 2))
    qid = GaussianMixture.gaussian([0.0, 0.0], 1.0)
    out = pf_ode_sample(exact_eps(qid, spec), spec, SamplerConfig(steps=50, scheme="Heun"), 50,
                        None, x_init=x0)
    np.testing.assert_allclose(out, x0, atol=1e-12)


def test_pf_ode_exact_score_transport_and_sde_agreement():
    spec = vp()
    rng = np.random.default_rng(5)
    p0 = pushforward(N21, spec.s_hi, spec)
    eps = exact_eps(N21, spec)
    ode = pf_ode_sample(eps, spec, SamplerConfig(steps=500, scheme="Heun"), 100_000, rng,
                        x_init=p0.sample(100_000, rng))[:, 0]
    assert _moments_ok(ode, 2.0, 1.0)
    sde = reverse_sde_sample(eps, spec, SamplerConfig(steps=500), 100_000, rng,
                             x_init=p0.sample(100_000, rng))[:, 0]
    se_mean = math.sqrt((ode.var() + sde.var()) / 100_000)
    se_var = math.sqrt(2 * (ode.var() ** 2 + sde.var() ** 2) / 100_000)
    assert abs(ode.mean() - sde.mean()) < 3 * se_mean
    assert abs(ode.var() - sde.var()) < 3 * se_var


def test_pf_ode_from_qid_carries_initial_mismatch():
    # the deterministic flow does not forget that P_0 has mean 2 mu(T), not 0
    spec = vp()
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((100_000, 1))
    mu_t = float(mu_sigma(spec.s_hi, spec)[0])
    eps = exact_eps(N21, spec)
    cfg = SamplerConfig(steps=200, scheme="Heun")
    from_qid = pf_ode_sample(eps, spec, cfg, len(x0), None, x_init=x0)
    from_p0 = pf_ode_sample(eps, spec, cfg, len(x0), None, x_init=x0 + 2 * mu_t)
    shift = float(np.mean(from_p0 - from_qid))
    assert 0 < shift < 0.05
    assert abs(from_p0.mean() - 2.0) < 3 / math.sqrt(len(x0))


def test_pf_ode_is_deterministic_given_initial_draws():
    spec = vp()
    x0 = np.random.default_rng(6).standard_normal((20, 1))
    eps = exact_eps(N21, spec)
    a = pf_ode_sample(eps, spec, SamplerConfig(steps=30), 20, np.random.default_rng(1), x_init=x0)
    b = pf_ode_sample(eps, spec, SamplerConfig(steps=30), 20, np.random.default_rng(2), x_init=x0)
    np.testing.assert_array_equal(a, b)


def test_time_convention_forward_time_query():
    # a narrow, far-off target: the oracle is tiny near s_hi and huge near s_lo
    spec = vp()
    target = GaussianMixture.gaussian([3.0], 0.05)
    eps = exact_eps(target, spec)
    good = reverse_sde_sample(eps, spec, SamplerConfig(steps=1000), 20_000,
                              np.random.default_rng(7), dim=1)[:, 0]
    assert _moments_ok(good, 3.0, 0.05, bias=0.01)
    flipped = lambda x, s: eps(x, spec.s_hi + spec.s_lo - s)
    with np.errstate(all="ignore"):
        try:
            bad = reverse_sde_sample(flipped, spec, SamplerConfig(steps=1000), 20_000,
                                     np.random.default_rng(7), dim=1)[:, 0]
        except SamplingAbort:
            return
    assert not _moments_ok(bad, 3.0, 0.05, bias=0.01)


def test_straight_line_process_sampling():
    spec = sl(0.1)
    x = pf_ode_sample(exact_eps(N21, spec), spec, SamplerConfig(steps=400, scheme="Heun"), 20_000,
                      np.random.default_rng(8), dim=1)[:, 0]
    assert _moments_ok(x, 2.0, 1.0, bias=0.01)


def test_nonfinite_state_aborts_with_step():
    spec = vp()
    blow = lambda x, s: np.full_like(x, np.inf)
    with pytest.raises(SamplingAbort) as info:
        reverse_sde_sample(blow, spec, SamplerConfig(steps=5), 3, np.random.default_rng(0), dim=1)
    assert info.value.step == 1
    with pytest.raises(SamplingAbort):
        pf_ode_sample(blow, spec, SamplerConfig(steps=5, scheme="Heun"), 3,
                      np.random.default_rng(0), dim=1)
    with pytest.raises(ValueError):
        reverse_sde_sample(_zero, spec, SamplerConfig(scheme="Heun"), 3, np.random.default_rng(0),
                           dim=1)
    with pytest.raises(ValueError):
        reverse_sde_sample(_zero, spec, SamplerConfig(), 3, np.random.default_rng(0))


def test_samples_csv_roundtrip(tmp_path):
    x = np.random.default_rng(9).normal(size=(7, 3))
    write_samples_csv(tmp_path / "s.csv", x, SamplerConfig(steps=10), {"seed": 3})
    text = (tmp_path / "s.csv").read_text()
    assert text.startswith("# steps: 10") and "# seed: 3" in text
    np.testing.assert_array_equal(read_samples_csv(tmp_path / "s.csv"), x)
