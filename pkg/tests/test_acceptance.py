"""Acceptance suite, one test per criterion.

Every test prints a single ``criterion N: PASS|FAIL`` line (also collected in
the terminal summary) and asserts the criterion at its stated tolerance.  Seeds
are fixed up front.  Run with ``pytest tests/test_acceptance.py -v``.
"""
import csv
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from chda import proxy
from chda.channelgen import ChannelPrior, generate_training_set
from chda.esmda import EsmdaConfig, esmda_update, run_esmda
from chda.fieldcore import Ensemble, GridSpec, LogPermField, RngStream
from chda.flowsim import ObservationSet, SimConfig, five_spot, mass_balance_error, run, simulate, simulate_ensemble
from chda.localization import CovariancePair, gaspari_cohn, pseudo_optimal_taper
from chda.scorediff import (GaussianScore, NetworkSpec, NormStats, Observations, PointMassScore, ScoreNet,
                            TrainConfig, VESchedule, dsm_train, sample_ode, sample_pc, sample_posterior)
from chda.workbench import load_config, run_experiment

pytestmark = pytest.mark.acceptance

ANALOG = Path(__file__).resolve().parents[1] / "configs" / "analog32.json"
SCHED = VESchedule()


@pytest.fixture
def report(acceptance_lines):
    def _report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print("\n" + line)
        acceptance_lines.append(line)
        assert ok, line
    return _report


# -- 1. taper oracles -------------------------------------------------------------

def _gc_poly(r: Fraction, c: Fraction) -> Fraction:
    z = r / c
    if z <= 1:
        return -Fraction(1, 4) * z**5 + Fraction(1, 2) * z**4 + Fraction(5, 8) * z**3 - Fraction(5, 3) * z**2 + 1
    if z < 2:
        return (Fraction(1, 12) * z**5 - Fraction(1, 2) * z**4 + Fraction(5, 8) * z**3 + Fraction(5, 3) * z**2
                - 5 * z + 4 - Fraction(2, 3) / z)
    return Fraction(0)


def test_criterion_1_taper_oracles(report):
    errs = []
    for c in (Fraction(1), Fraction(7, 2), Fraction(50)):
        for r in (0 * c, c, 2 * c, 3 * c) + tuple(c * Fraction(k, 16) for k in range(1, 40)):
            errs.append(abs(gaspari_cohn(float(r), float(c)) - float(_gc_poly(r, c))))
    anchors = [abs(gaspari_cohn(0.0, 3.0) - 1.0), abs(gaspari_cohn(3.0, 3.0) - 5.0 / 24.0),
               abs(gaspari_cohn(6.0, 3.0)), abs(gaspari_cohn(6.5, 3.0))]
    one = np.ones((1, 1))
    po = [abs(pseudo_optimal_taper(CovariancePair(one, np.ones(1), np.ones(1)), 50).entries[0, 0] - 25 / 26),
          abs(pseudo_optimal_taper(CovariancePair(0.5 * one, np.ones(1), np.ones(1)), 10).entries[0, 0] - 2 / 3),
          # c = 2, var_z = 4, var_d = 1, N_e = 20: 4 / (4 + 8 / 20)
          abs(pseudo_optimal_taper(CovariancePair(2.0 * one, np.full(1, 4.0), np.ones(1)), 20).entries[0, 0]
              - 4.0 / 4.4)]
    worst = max(errs + anchors + po)
    report(1, worst < 1e-12, f"max deviation from polynomial and hand-evaluated oracles {worst:.2e} (< 1e-12)")


# -- 2. sampler moments -------------------------------------------------------------

def test_criterion_2_sampler_moments(report):
    n, var = 2000, 0.25
    mean = np.linspace(2.0, 3.0, 64).reshape(8, 8)
    m = GaussianScore(mean, var)
    se_m, se_v = math.sqrt(var / n), var * math.sqrt(2.0 / (n - 1))
    details, ok = [], True
    for name, x in (("ode", sample_ode(m, SCHED, 1000, RngStream(2024), n=n)),
                    ("pc", sample_pc(m, SCHED, 1000, 0.16, RngStream(2025), n=n))):
        zm = np.max(np.abs(x.mean(axis=0) - mean)) / se_m
        zv = np.max(np.abs(x.var(axis=0, ddof=1) - var)) / se_v
        ok &= bool(zm <= 3.0 and zv <= 3.0)
        ratio = float(x.var(axis=0, ddof=1).mean() / var)
        details.append(f"{name} max|mean err| {zm:.2f} SE, max|var err| {zv:.2f} SE, mean var ratio {ratio:.3f}")
    x0 = np.random.default_rng(1).uniform(1, 4, size=(8, 8))
    collapse = float(np.max(np.abs(sample_ode(PointMassScore(x0), SCHED, 1000, RngStream(2026), n=20) - x0)))
    ok &= collapse < 1e-2
    report(2, ok, "; ".join(details) + f"; point-mass inf-norm {collapse:.1e} (< 1e-2)")


# -- 3. gradient exactness ----------------------------------------------------------

def _relative_gradient_error(seed: int, h: float = 1e-5) -> float:
    r = np.random.default_rng(seed)
    spec = NetworkSpec(channels=int(r.integers(2, 5)), n_blocks=int(r.integers(1, 4)), kernel=int(r.choice([1, 3])),
                       embed_dim=int(2 * r.integers(2, 5)), fourier_scale=float(r.uniform(1, 16)))
    ny, nx = int(r.integers(3, 7)), int(r.integers(3, 7))
    net = ScoreNet(spec, np.random.default_rng(seed + 1000), out_scale=float(r.uniform(0.1, 1.0)))
    B = int(r.integers(1, 4))
    x0, eps = r.normal(size=(B, ny, nx)), r.normal(size=(B, ny, nx))
    t = r.uniform(0.01, 1.0, B)
    st = np.asarray(SCHED.sigma_t(t))
    _, g = net.loss_and_grad(x0, t, eps, st)
    w = net.get_flat()
    num = np.empty(w.size)
    for i in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        net.set_flat(wp)
        lp, _ = net.loss_and_grad(x0, t, eps, st)
        net.set_flat(wm)
        lm, _ = net.loss_and_grad(x0, t, eps, st)
        num[i] = (lp - lm) / (2 * h)
    net.set_flat(w)
    return float(np.linalg.norm(g - num) / np.linalg.norm(num))


def test_criterion_3_gradient_exactness(report):
    errs = [_relative_gradient_error(seed) for seed in range(10)]
    report(3, max(errs) < 1e-4, f"10 random networks, every parameter, max relative error {max(errs):.1e} (< 1e-4)")


# -- 4. linear-Gaussian ESMDA -------------------------------------------------------

def test_criterion_4_linear_gaussian_esmda(report):
    n = 100_000
    Z = RngStream(41).standard_normal((n, 1))
    obs = ObservationSet(np.ones(1), np.ones(1), np.ones(1))
    Za = esmda_update(Z, Z.copy(), obs, 1.0, rng=RngStream(42), bounds=None)
    em, ev = abs(Za.mean() / 0.5 - 1.0), abs(Za.var(ddof=1) / 0.5 - 1.0)

    r = np.random.default_rng(43)
    nz, nd, ne = 6, 4, 10_000
    G = r.normal(size=(nd, nz))
    sig = np.full(nd, 0.5)
    obs = ObservationSet(np.arange(1.0, nd + 1), G @ r.normal(size=nz), sig)
    S = G @ G.T + np.diag(sig**2)
    kalman = G.T @ np.linalg.solve(S, obs.d_obs)
    prior = Ensemble(GridSpec(3, 2, 1.0, 1.0, 1.0), RngStream(44).standard_normal((ne, 2, 3)), seed=44, tag="prior")
    post, _ = run_esmda(EsmdaConfig(4, (4.0, 4.0, 4.0, 4.0), None), prior, lambda Z: Z @ G.T, obs,
                        rng=RngStream(45))
    ek = np.linalg.norm(post.matrix().mean(axis=0) - kalman) / np.linalg.norm(kalman)
    report(4, em < 0.02 and ev < 0.02 and ek < 0.05,
           f"scalar mean err {em:.2%}, var err {ev:.2%} (< 2%); 4-step vs Kalman mean err {ek:.2%} (< 5%)")


# -- 5. flow conservation -----------------------------------------------------------

def test_criterion_5_flow_conservation(report):
    cfg = SimConfig()
    fields = generate_training_set(20, GridSpec(), RngStream(55))
    mb = max(float(mass_balance_error(f, cfg, run(f, cfg)).max()) for f in fields.members)
    g = GridSpec(33, 33, 10.0, 10.0, 10.0)
    s = simulate(LogPermField(g, np.full(g.shape, 2.0)), cfg)
    sym = float(np.ptp(s.values, axis=1).max())
    report(5, mb < 1e-3 and sym < 1e-8,
           f"max relative mass-balance error {mb:.1e} over 20 fields x 24 reports (< 1e-3); "
           f"homogeneous monitor spread {sym:.1e} bar (< 1e-8)")


# -- 6 and 9. desk-scale experiment -------------------------------------------------

@pytest.fixture(scope="module")
def analog_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("analog")
    cfg = load_config(ANALOG)
    run_experiment(cfg, base / "run1", make_report=False)
    run_experiment(cfg, base / "run2", make_report=False)
    sweep = load_config(ANALOG, overrides={"ensemble_sizes": [50, 100, 200], "methods": ["none"]})
    run_experiment(sweep, base / "sweep", make_report=False)
    return base


def _nv_table(path):
    with open(path) as fh:
        return {r["method"]: {k: float(v) for k, v in r.items() if k != "method"} for r in csv.DictReader(fh)}


def test_criterion_6_nv_trends(report, analog_runs):
    nv = _nv_table(analog_runs / "run1" / "nv_table.csv")
    base = nv["none"]["Ne50"]
    gain_rf, gain_gbt = nv["ml-rf"]["Ne50"] - base, nv["ml-gbt"]["Ne50"] - base
    sweep = _nv_table(analog_runs / "sweep" / "nv_table.csv")["none"]
    seq = [sweep["Ne50"], sweep["Ne100"], sweep["Ne200"]]
    mono = all(b >= a for a, b in zip(seq, seq[1:]))
    others = ", ".join(f"{k} {v['Ne50']:.3f}" for k, v in nv.items())
    report(6, gain_rf >= 0.15 and gain_gbt >= 0.15 and mono,
           f"NV at Ne=50: {others}; gains rf {gain_rf:+.3f}, gbt {gain_gbt:+.3f} (>= 0.15); "
           f"none over Ne 50/100/200: {' <= '.join(f'{v:.3f}' for v in seq)}")


def test_criterion_9_end_to_end_determinism(report, analog_runs):
    a = (analog_runs / "run1" / "records.csv").read_bytes()
    b = (analog_runs / "run2" / "records.csv").read_bytes()
    report(9, a == b and len(a) > 0, f"records.csv byte-identical across two runs ({len(a)} bytes)")


# -- 7. proxy trends --------------------------------------------------------------------

def test_criterion_7_proxy_trends(report):
    cfg = load_config(ANALOG)
    grid, prior, sim = cfg.grid_spec(), cfg.channel_prior(), cfg.sim_config()
    wells = five_spot(grid, sim.rate_m3_per_day, cfg.sim.monitor_offset)
    root = RngStream(cfg.seed).fork("proxy-acceptance")
    wins, rows = 0, []
    for rep in range(10):
        rr = root.fork(f"rep-{rep}")
        won = True
        for ne in (50, 100):
            Z = generate_training_set(ne, grid, rr.fork(f"ensemble-{ne}"), prior).matrix()
            D = simulate_ensemble(Z, grid, sim, wells)
            rmse = {k: proxy.fit(k, Z, D, rr.fork(f"split-{ne}")).meta["val_rmse_total"]
                    for k in ("linear", "rf", "gbt")}
            won &= rmse["rf"] < rmse["linear"] and rmse["gbt"] < rmse["linear"]
            rows.append(f"{rep}/{ne}: " + " ".join(f"{k} {v:.2f}" for k, v in rmse.items()))
        wins += won
    print("\n" + "\n".join(rows))
    report(7, wins >= 9, f"trees beat linear at both Ne in {wins}/10 repetitions (>= 9)")


# -- 8. posterior conditioning ------------------------------------------------------

def test_criterion_8_posterior_conditioning(report):
    g = GridSpec(16, 16, 20.0, 20.0, 10.0)
    pri = ChannelPrior(channel_thickness=0.4)
    root = RngStream(808)
    train = generate_training_set(256, g, root.fork("train"), pri).values
    truth = generate_training_set(1, g, root.fork("truth"), pri).values[0]
    stats = NormStats.from_data(train)

    def obs_rmse(model, spacing, tag):
        obs = Observations.from_field(truth, spacing, 0.01)
        x = sample_posterior(model, obs, 1.0, SCHED, 500, 0.16, root.fork(tag), n=20)
        r = x.reshape(x.shape[0], -1)[:, obs.cells] - obs.values
        return float(np.sqrt(np.mean(r * r)))

    gauss = GaussianScore(np.zeros(g.shape), 1.0, stats=stats)
    rg = max(obs_rmse(gauss, sp, f"gauss-{sp}") for sp in (4, 8))
    net = dsm_train(train, NetworkSpec(channels=8, n_blocks=2, embed_dim=8), SCHED,
                    TrainConfig(epochs=15, batch_size=32, optimizer="adam", lr=2e-3, lr_min=1e-5), root.fork("init"))
    rn = max(obs_rmse(net, sp, f"net-{sp}") for sp in (4, 8))
    report(8, rg < 0.01 and rn < 0.05,
           f"observed-cell RMSE: gaussian backend {rg:.4f} (< 0.01), trained 16x16 network {rn:.4f} (< 0.05)")
