"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``report`` fixture; the lines
are repeated in the terminal summary. Tolerances and runtimes are pinned to
the stated acceptance values.
"""
import dataclasses
import json
import math
import time

import numpy as np
import pytest

from entroflux import cli, lattice
from entroflux.density import kl_and_cross_entropy, logp_lower_bound, logp_lower_bound_batch
from entroflux.gaussmix import GaussianMixture, MCEstimate, pushforward, random_mixture
from entroflux.generate import exact_eps
from entroflux.net import MlpParams
from entroflux.process import DiffusionSpec, mu_sigma, vp
from entroflux.thermo import (default_grid, entropy_curve, free_energy_gap, kl_to_qid_curve,
                              sm_entropy_and_identity, stot_gaussian_exact, stot_via_kl_identity,
                              tur_check)
from entroflux.train import (TrainConfig, block_trend, draw_noised, eps_model, fit, init_model,
                             noised_loss)

N21 = GaussianMixture.gaussian([2.0], 1.0)
N01 = GaussianMixture.gaussian([0.0], 1.0)


def _zero(x, s):
    return np.zeros_like(np.asarray(x, dtype=float))


def test_criterion_1_total_entropy_three_ways(report):
    t0 = time.perf_counter()
    spec = vp(2.0, 2.0)
    n = 100_000
    p0 = pushforward(N21, spec.s_hi, spec)
    kl_p0 = 0.5 * float(p0.means[0, 0]) ** 2  # unit variances on both sides
    analytic = 2.0 - kl_p0
    np.testing.assert_allclose(analytic, stot_gaussian_exact([2.0], 1.0, spec), rtol=1e-12)

    curve = entropy_curve("IdealTot", N21, spec, grid=default_grid(spec, 500), n=n,
                          rng=np.random.default_rng(1))
    # the curve starts at the lower cutoff; the missing sliver is a known truncation term
    path_err = curve.final.std_err + curve.quad_error + abs(curve.tail_estimate)
    kl_id = stot_via_kl_identity(N21, spec, n, np.random.default_rng(2))
    gap = free_energy_gap(N21, spec, n, np.random.default_rng(3), against="final")
    checks = {"path integral": (curve.final.value, path_err),
              "KL identity": (kl_id.value, kl_id.std_err),
              "free-energy gap": (gap.value, gap.std_err)}
    oks = {k: abs(v - analytic) <= 3 * e for k, (v, e) in checks.items()}
    runtime = time.perf_counter() - t0
    ok = all(oks.values()) and runtime < 60
    detail = ", ".join(f"{k}={v:.5f}+-{e:.1e}" for k, (v, e) in checks.items())
    report(1, ok, f"analytic={analytic:.5f}; {detail}; runtime={runtime:.1f}s (<60s)")
    assert ok


def test_criterion_2_lattice_calculus(report):
    t0 = time.perf_counter()
    # four spacings (three refinements by 3/2) that keep every run inside the
    # dense endpoint-kernel budget, so the log-sum check runs exactly on each
    errs, logsum_ok, rows = [], True, []
    for k in range(4):
        ell = 0.12 / 1.5**k
        state, steps = lattice.ou_lattice(ell)
        traj = lattice.run(state, steps)
        horizon = steps * state.dt
        spec = DiffusionSpec("VPx", beta_min=2.0, beta_max=2.0, kappa=math.sqrt(0.5),
                             horizon=horizon)
        exact = stot_gaussian_exact([2.0], 0.25, spec, s_end=horizon)
        res = lattice.endpoint_kl_and_shannon(traj)
        logsum_ok &= res.stot >= res.kl_endpoint - 1e-12 * max(1.0, abs(res.kl_endpoint))
        errs.append(abs(res.stot - exact))
        rows.append(f"ell={ell:.4f} err={errs[-1]:.2e}")
    orders = [math.log(a / b) / math.log(1.5) for a, b in zip(errs, errs[1:])]
    state, _ = lattice.ou_lattice(0.1, stationary_start=True)
    traj = lattice.run(state, 500)
    stat = lattice.endpoint_kl_and_shannon(traj)
    logsum_ok &= stat.stot >= stat.kl_endpoint - 1e-12
    runtime = time.perf_counter() - t0
    ok = min(orders) >= 0.8 and logsum_ok and abs(stat.stot) < 1e-10 and runtime < 120
    report(2, ok, f"{'; '.join(rows)}; orders={[round(o, 2) for o in orders]} (>=0.8); "
                  f"log-sum held={logsum_ok}; stationary stot={stat.stot:.1e} (<1e-10); "
                  f"runtime={runtime:.1f}s (<120s)")
    assert ok


def test_criterion_3_h_theorem(report):
    t0 = time.perf_counter()
    spec = vp()
    grid = default_grid(spec, 500)
    failures, worst = [], -np.inf
    for dim in (1, 3, 6):
        for seed in range(10):
            gm = random_mixture(dim, 5, rng=np.random.default_rng(1000 * dim + seed))
            kl = kl_to_qid_curve(gm, spec, grid, 2000, np.random.default_rng(2000 * dim + seed))
            z = np.max(np.diff(kl.kl) / np.maximum(kl.step_std_err, 1e-300))
            worst = max(worst, float(z))
            if not kl.is_nonincreasing():
                failures.append((dim, seed))
    runtime = time.perf_counter() - t0
    ok = not failures and runtime < 300
    report(3, ok, f"30 mixtures x 500 points; largest rise={worst:.2f} step std errs (<=3); "
                  f"failures={failures}; runtime={runtime:.1f}s (<300s)")
    assert ok


def test_criterion_4_qid_equivalence_and_entropy_gap(report):
    t0 = time.perf_counter()
    cfg = cli.load_config("gm_vp_d6")
    gm = cli.build_mixture(cfg)
    finals = {}
    for name in ("gm_vp_d6", "gm_vpx_d6", "gm_sl_d6"):
        spec = cli.build_spec(cli.load_config(name))
        curve = entropy_curve("IdealTot", gm, spec, grid=default_grid(spec, 500), n=1000,
                              rng=np.random.default_rng(4))
        finals[spec.kind] = curve.final.value
    rel = abs(finals["VPx"] - finals["SL"]) / finals["VPx"]
    ratio = finals["VPx"] / finals["VP"]
    runtime = time.perf_counter() - t0
    ok = rel < 0.05 and ratio >= 50 and runtime < 300
    report(4, ok, f"S_tot VP={finals['VP']:.3f} VPx={finals['VPx']:.1f} SL={finals['SL']:.1f}; "
                  f"|VPx-SL|/VPx={rel:.4f} (<0.05); VPx/VP={ratio:.1f} (>=50); "
                  f"runtime={runtime:.1f}s (<300s)")
    assert ok


# transport experiment sizes: 4 VP seeds for 200 epochs; the two high-entropy
# processes are trained once for COMPARE_EPOCHS and compared with VP at that epoch
VP_SEEDS = (0, 1, 2, 3)
COMPARE_EPOCHS = 100
KL_N_X, KL_N_PATH = 256, 1000


def _kl(gm, params, emb, spec, seed):
    model = eps_model(params.astype(np.float64), emb, spec)
    return kl_and_cross_entropy(gm, model, spec, n_x=KL_N_X, n_path=KL_N_PATH,
                                rng=np.random.default_rng(seed)).kl


def test_criterion_5_transport_experiment(report):
    t0 = time.perf_counter()
    cfg = cli.load_config("gm_vp_d6")
    spec, gm = cli.build_spec(cfg), cli.build_mixture(cfg)
    data = cli.training_data(cfg, gm)
    ideal = entropy_curve("IdealTot", gm, spec, grid=default_grid(spec, 500), n=1000,
                          rng=np.random.default_rng(5)).final.value
    s_nn_logs, s_nn_final, kl_final, kl_mid = [], [], [], []
    for seed in VP_SEEDS:
        tcfg = cli.build_train_config(cfg, seed)
        mid = {}

        def at_compare_epoch(epoch, res, mid=mid):
            if epoch == COMPARE_EPOCHS:
                mid["kl"] = _kl(gm, res.params, res.emb, spec, 50 + seed)

        res = fit(data, spec, tcfg, p_d=gm, callback=at_compare_epoch)
        s_nn_logs.append([r["S_NN_T"] for r in res.log])
        model = eps_model(res.params.astype(np.float64), res.emb, spec)
        s_nn_final.append(entropy_curve("Neural", gm, spec, model, grid=default_grid(spec, 500),
                                        n=1000, rng=np.random.default_rng(6)).final.value)
        kl_final.append(_kl(gm, res.params, res.emb, spec, 60 + seed))
        kl_mid.append(mid["kl"])

    others = {}
    for name in ("gm_vpx_d6", "gm_sl_d6"):
        ocfg = cli.load_config(name)
        ospec = cli.build_spec(ocfg)
        tcfg = dataclasses.replace(cli.build_train_config(ocfg, 0), epochs=COMPARE_EPOCHS)
        res = fit(cli.training_data(ocfg, gm), ospec, tcfg)
        others[ospec.kind] = _kl(gm, res.params, res.emb, ospec, 70)

    monotone, _, worst_z = block_trend(np.array(s_nn_logs), window=10)
    s_nn_mean = float(np.mean(s_nn_final))
    kl_mean = MCEstimate(float(np.mean([k.value for k in kl_final])),
                         math.sqrt(sum(k.std_err**2 for k in kl_final)) / len(kl_final),
                         sum(k.n for k in kl_final))
    vp_mid = float(np.mean([k.value for k in kl_mid]))
    ordered = all(vp_mid < k.value for k in others.values())
    runtime = time.perf_counter() - t0
    ok = (monotone and s_nn_mean >= 0.8 * ideal and kl_mean.value < 0.5 and ordered
          and runtime < 3600)
    report(5, ok,
           f"S_NN(T) per seed={[round(v, 3) for v in s_nn_final]} mean={s_nn_mean:.3f} vs "
           f"ideal={ideal:.3f} ({s_nn_mean / ideal:.0%}, >=80%); smoothed trend worst step "
           f"z={worst_z:.2f} (>=-3); final KL per seed={[round(k.value, 3) for k in kl_final]} "
           f"mean={kl_mean.value:.3f}+-{kl_mean.std_err:.3f} (<0.5); KL at epoch "
           f"{COMPARE_EPOCHS}: VP={vp_mid:.3f} VPx={others['VPx'].value:.2f} "
           f"SL={others['SL'].value:.2f} (VP lowest={ordered}); runtime={runtime:.0f}s (<3600s)")
    assert ok


@pytest.mark.xfail(strict=True, reason="score-matching entropy of a stationary N(0,1) under "
                                       "beta=2, T=1 is (D/2) int beta ds = 1.0, not 2.0")
def test_criterion_6_score_matching_pathology(report):
    t0 = time.perf_counter()
    spec = vp(2.0, 2.0)
    grid = default_grid(spec, 500)
    em = entropy_curve("IdealTot", N01, spec, grid=grid, n=10_000, rng=np.random.default_rng(7))
    em_ok = abs(em.final.value) <= 3 * em.final.std_err + 1e-12
    sm = sm_entropy_and_identity(N01, spec, n=10_000, rng=np.random.default_rng(8), grid=grid)
    sm_ok = abs(sm.s_sm.value - 2.0) <= 3 * sm.combined_std_err
    id_ok = sm.identity_gap < 3 * sm.combined_std_err
    runtime = time.perf_counter() - t0
    ok = em_ok and sm_ok and id_ok and runtime < 60
    report(6, ok, f"entropy-matching S_tot={em.final.value:.2e} (=0: {em_ok}); "
                  f"S_sm={sm.s_sm.value:.4f}+-{sm.s_sm.std_err:.4f} (target 2.0: {sm_ok}; "
                  f"closed form (D/2) int beta = {sm.beta_term:.4f}); identity gap="
                  f"{sm.identity_gap:.2e} < 3 sigma={3 * sm.combined_std_err:.2e}: {id_ok}; "
                  f"runtime={runtime:.1f}s (<60s)")
    assert ok


def test_criterion_7_thermodynamic_uncertainty(report):
    t0 = time.perf_counter()
    rows, ok = [], True
    for sigma in (1.0, 0.5, 0.3):
        spec = vp(sigma**2, sigma**2)  # constant noise sigma with equilibrium N(0, 1)
        curve = entropy_curve("IdealTot", N21, spec, grid=default_grid(spec, 500), n=10_000,
                              rng=np.random.default_rng(9))
        stot = curve.final.value + curve.tail_estimate
        mu, _ = mu_sigma(spec.s_hi, spec)
        w2_sq = (2.0 - 2.0 * float(mu)) ** 2  # N(2,1) -> N(2 mu, 1)
        err = (curve.final.std_err + curve.quad_error) * sigma**2 * spec.horizon
        sat, slack = tur_check(stot, sigma**2 * spec.horizon, w2_sq, err)
        ok &= sat and slack >= 0
        rows.append(f"sigma={sigma}: S_tot={stot:.4f} slack={slack:.4f}")
    runtime = time.perf_counter() - t0
    ok &= runtime < 120
    report(7, ok, f"{'; '.join(rows)}; runtime={runtime:.1f}s (<120s)")
    assert ok


def test_criterion_8_density_bound(report):
    t0 = time.perf_counter()
    spec = vp()
    stat = logp_lower_bound([0.0], _zero, spec, n_s=20_000, rng=np.random.default_rng(10))
    target = -0.5 * math.log(2 * math.pi)
    stat_ok = abs(stat.value - target) <= 3 * stat.std_err
    res = kl_and_cross_entropy(N21, exact_eps(N21, spec), spec, n_x=256, n_path=4000,
                               rng=np.random.default_rng(11))
    kl_ok = abs(res.kl.value) < 3 * res.kl.std_err
    rng = np.random.default_rng(12)
    x = N21.sample(20, rng)
    vals, ses = logp_lower_bound_batch(x, exact_eps(N21, spec), spec, n_s=5000, rng=rng)
    below = int(np.sum(vals <= N21.log_density(x) + 3 * ses))
    runtime = time.perf_counter() - t0
    ok = stat_ok and kl_ok and below == 20 and runtime < 180
    report(8, ok, f"stationary bound={stat.value:.4f}+-{stat.std_err:.4f} vs {target:.4f}; "
                  f"oracle KL={res.kl.value:.4f}+-{res.kl.std_err:.4f} (<3 sigma: {kl_ok}); "
                  f"bound<=truth at {below}/20 probes; runtime={runtime:.1f}s (<180s)")
    assert ok


def _training_loss(params, emb, noised, spec, cfg):
    return noised_loss(params, emb, noised, spec, cfg)[0]


def _tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())
            if p.suffix in (".csv", ".json", ".npz") and p.name != "manifest.json"}


TINY = {
    "seed": 3,
    "process": {"kind": "VP"},
    "mixture": {"dim": 2, "n_components": 2, "side": 3.0, "seed": 1},
    "n_train": 128,
    "data_seed": 5,
    "train": {"epochs": 2, "batch_size": 64, "hidden": [16], "n_features": 8,
              "fourier_scale": 0.1, "probe_grid": 10, "probe_per_point": 10},
    "curve": {"n_points": 20, "n_probe": 20},
    "density": {"n_x": 8, "n_path": 40},
    "sampler": {"steps": 20, "n": 50},
    "lattice": {"ell": [0.1, 0.05], "horizon": 1.0},
}


def test_criterion_9_gradients_and_reproducibility(report, tmp_path):
    # full-size network (512, 256) on a D=6 problem, float64, random output layer
    spec = vp()
    cfg = TrainConfig(dtype="float64", seed=0)
    rng = np.random.default_rng(13)
    emb, params = init_model(6, cfg, rng)
    params.weights[-1][:] = rng.standard_normal(params.weights[-1].shape) * 0.05
    noised = draw_noised(rng.normal(size=(16, 6)) * 2.0, spec, 2, rng)
    _, g = noised_loss(params, emb, noised, spec, cfg)
    h, errs = 1e-5, []
    for _ in range(20):
        dirs = [rng.standard_normal(a.shape) for a in params.arrays()]
        shifted = [MlpParams.from_arrays([a + sgn * h * d for a, d in zip(params.arrays(), dirs)],
                                         params.activation) for sgn in (1, -1)]
        fd = (_training_loss(shifted[0], emb, noised, spec, cfg)
              - _training_loss(shifted[1], emb, noised, spec, cfg)) / (2 * h)
        an = sum(float(np.sum(ga * d)) for ga, d in zip(g.arrays(), dirs))
        errs.append(abs(fd - an) / abs(an))
    grad_ok = max(errs) < 1e-5

    files = {}
    for command, extra in (("lattice", {}), ("transport", {}), ("sample", {"oracle": True}),
                           ("density", {"oracle": True}), ("entropy-curve", {"oracle": True})):
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(dict(TINY, **extra)))
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{command}_{rep}"
            assert cli.run([command, "--config", str(path), "--out", str(out)]) == cli.EXIT_OK
            outs.append(_tree_bytes(out))
        files[command] = bool(outs[0]) and outs[0] == outs[1]
    repro_ok = all(files.values())
    ok = grad_ok and repro_ok
    report(9, ok, f"{params.n_params} parameters, 20 random directions, max rel err="
                  f"{max(errs):.1e} (<1e-5); byte-identical reruns={files}")
    assert ok
