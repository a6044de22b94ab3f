import dataclasses
import math

import numpy as np
import pytest

from chda.channelgen import generate_training_set
from chda.fieldcore import GridSpec, LogPermField, RngStream
from chda.flowsim import (ForwardError, SimConfig, SolverError, WellSpec, five_spot, mass_balance_error, observe,
                          read_observations_csv, read_series_csv, run, simulate, simulate_ensemble,
                          write_observations_csv, write_series_csv)

G32 = GridSpec(32, 32, 10.0, 10.0, 10.0)


@pytest.fixture(scope="module")
def fields():
    return generate_training_set(6, G32, RngStream(17))


def test_output_shape_and_bounds(fields):
    s = simulate(fields[0], SimConfig())
    assert s.values.shape == (24, 4) and s.flat.size == 96
    assert np.all(np.isfinite(s.flat)) and np.all(s.flat >= 0)
    assert np.allclose(s.times, np.arange(1, 25) * 730 / 24)


def test_flat_order_is_time_major(fields):
    s = simulate(fields[0], SimConfig())
    assert np.array_equal(s.flat[4:8], s.values[1])


def test_default_five_spot_geometry():
    w = five_spot(GridSpec(), 1.0)
    inj = w[0]
    assert (inj.i, inj.j) == (32, 32)
    assert [(m.i - 32, m.j - 32) for m in w[1:]] == [(0, 16), (16, 0), (0, -16), (-16, 0)]


def test_invalid_wells_rejected():
    g = GridSpec(16, 16)
    w = five_spot(g, 1.0)
    with pytest.raises(ValueError):
        run(LogPermField(g, np.full(g.shape, 2.0)), SimConfig(), w[:4])
    bad = w[:4] + [WellSpec(0, 0, "monitor", "W")]
    with pytest.raises(ValueError):
        run(LogPermField(g, np.full(g.shape, 2.0)), SimConfig(), bad)


def test_zero_rate_equilibrium():
    cfg = SimConfig(injection_rate=0.0)
    s = simulate(LogPermField(G32, np.full(G32.shape, 2.5)), cfg)
    assert np.all(s.values == 150.0)


@pytest.mark.parametrize("solver", ["cg", "direct"])
def test_homogeneous_symmetry(solver):
    g = GridSpec(33, 33, 10.0, 10.0, 10.0)
    s = simulate(LogPermField(g, np.full(g.shape, 2.0)), SimConfig(solver=solver))
    assert np.ptp(s.values, axis=1).max() < 1e-8


def test_mass_balance(fields):
    cfg = SimConfig(solver="cg")
    for f in fields.members:
        res = run(f, cfg)
        assert mass_balance_error(f, cfg, res).max() < 1e-3


def test_cg_matches_direct(fields):
    a = simulate(fields[1], SimConfig(solver="cg")).flat
    b = simulate(fields[1], SimConfig(solver="direct")).flat
    assert np.abs(a - b).max() < 1e-6


def test_monotone_in_permeability(fields):
    cfg = SimConfig()
    for f in fields.members:
        p1 = run(f, cfg).series.injector
        p2 = run(LogPermField(G32, f.values + math.log10(2.0)), cfg).series.injector
        assert np.all(p2 <= p1 + 1e-9)


def test_time_step_halving(fields):
    cfg = SimConfig()
    fine = dataclasses.replace(cfg, substeps=2 * cfg.substeps)
    for f in fields.members[:3]:
        a = simulate(f, cfg).values
        b = simulate(f, fine).values
        assert np.max(np.abs(a - b) / b) < 5e-3


def test_determinism(fields):
    a = simulate(fields[2], SimConfig(solver="cg")).flat
    b = simulate(fields[2], SimConfig(solver="cg")).flat
    assert a.tobytes() == b.tobytes()


def test_non_finite_rejected():
    v = np.full(G32.shape, 2.0)
    v[0, 0] = np.inf
    with pytest.raises(ValueError):
        LogPermField(G32, v)


def test_solver_failure_reports_iterations(fields):
    with pytest.raises(SolverError) as ei:
        simulate(fields[0], SimConfig(solver="cg", max_iter=2))
    assert ei.value.iterations == 2 and ei.value.step == 0


def test_ensemble_forward_names_member(fields):
    Z = fields.matrix().copy()
    out = simulate_ensemble(Z[:2], G32, SimConfig())
    assert out.shape == (2, 96)
    with pytest.raises(ForwardError) as ei:
        simulate_ensemble(Z[:3], G32, SimConfig(solver="cg", max_iter=1))
    assert ei.value.member == 0


def test_observe_noise_free(fields):
    s = simulate(fields[0], SimConfig())
    o = observe(s, 0.0, RngStream(1))
    assert np.array_equal(o.d_obs, s.flat)


def test_observe_noise_statistics():
    from chda.flowsim import PressureSeries
    truth = PressureSeries(np.arange(1.0, 25.0), np.linspace(150, 220, 96).reshape(24, 4))
    r = RngStream(3)
    rel = np.concatenate([(observe(truth, 0.01, r.fork(i)).d_obs - truth.flat) / truth.flat
                          for i in range(10_000)])
    assert 0.0097 <= rel.std() <= 0.0103
    o = observe(truth, 0.01, r)
    assert np.allclose(o.cd_diag, (0.01 * truth.flat) ** 2, rtol=0, atol=0)


def test_csv_roundtrips(tmp_path, fields):
    s = simulate(fields[0], SimConfig())
    p = tmp_path / "s.csv"
    write_series_csv(p, s)
    assert p.read_text().splitlines()[0] == "report_day,well_N,well_E,well_S,well_W"
    assert np.array_equal(read_series_csv(p).values, s.values)
    o = observe(s, 0.01, RngStream(2))
    q = tmp_path / "o.csv"
    write_observations_csv(q, o)
    assert "sigma_N" in q.read_text().splitlines()[0]
    o2 = read_observations_csv(q)
    assert np.array_equal(o2.d_obs, o.d_obs) and np.array_equal(o2.sigma, o.sigma)
