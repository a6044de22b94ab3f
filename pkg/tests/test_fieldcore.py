import struct

import numpy as np
import pytest

from chda.fieldcore import (DimensionMismatchError, Ensemble, FormatError, GridSpec, InsufficientEnsembleError,
                            LogPermField, RngStream, TruncatedPayloadError, ensemble_mean_and_deviations,
                            export_csv, import_csv, load_ensemble, load_field, rng_fork, save_ensemble, save_field)


@pytest.fixture
def grid():
    return GridSpec()


def test_grid_defaults_and_validation(grid):
    assert (grid.nx, grid.ny, grid.dx, grid.dy, grid.thickness) == (64, 64, 5.0, 5.0, 10.0)
    assert grid.n_cells == 4096
    with pytest.raises(ValueError):
        GridSpec(nx=1)
    with pytest.raises(ValueError):
        GridSpec(dx=0.0)


def test_field_rejects_non_finite(grid):
    v = np.zeros(grid.shape)
    v[3, 4] = np.nan
    with pytest.raises(ValueError):
        LogPermField(grid, v)


def test_mean_and_deviations_two_members():
    g = GridSpec(4, 4)
    e = Ensemble(g, np.stack([np.ones(g.shape), 3 * np.ones(g.shape)]))
    mean, dev = ensemble_mean_and_deviations(e)
    assert np.all(mean == 2.0)
    assert np.all(np.abs(dev) == 1.0)


def test_identical_members_zero_deviation():
    g = GridSpec(4, 4)
    e = Ensemble(g, np.full((5,) + g.shape, 2.5))
    _, dev = ensemble_mean_and_deviations(e)
    assert np.all(dev == 0.0)


def test_insufficient_ensemble():
    g = GridSpec(4, 4)
    with pytest.raises(InsufficientEnsembleError, match="insufficient ensemble"):
        ensemble_mean_and_deviations(Ensemble(g, np.zeros((1,) + g.shape)))


def test_deviations_sum_to_zero():
    rng = np.random.default_rng(3)
    m = rng.normal(2.0, 0.7, size=(57, 300)) + 1e3
    _, dev = ensemble_mean_and_deviations(m)
    assert np.abs(dev.sum(axis=0)).max() < 1e-12 * 57 * 1e3 / 1e3 + 1e-10


def test_sample_variance_bounds(grid):
    # per-cell sample variance of 100 N(0,1) draws: 99% of cells within [0.6, 1.5]
    r = RngStream(11)
    m = r.standard_normal((100, grid.n_cells))
    _, dev = ensemble_mean_and_deviations(m)
    var = (dev ** 2).sum(axis=0) / 99
    assert np.mean((var >= 0.6) & (var <= 1.5)) >= 0.99


def test_field_roundtrip_bit_exact(tmp_path, grid):
    v = RngStream(1).normal(2.5, 0.5, grid.shape)
    f = LogPermField(grid, v)
    p = tmp_path / "f.bin"
    save_field(p, f)
    g = load_field(p)
    assert g.grid == grid
    assert g.values.tobytes() == f.values.tobytes()


def test_field_header_layout(tmp_path):
    g = GridSpec(3, 2, 1.5, 2.5, 4.0)
    p = tmp_path / "f.bin"
    save_field(p, LogPermField(g, np.arange(6.0).reshape(2, 3)))
    buf = p.read_bytes()
    assert struct.unpack_from("<4sHIIddd", buf, 0) == (b"CHDA", 1, 3, 2, 1.5, 2.5, 4.0)
    assert len(buf) == struct.calcsize("<4sHIIddd") + 6 * 8
    assert np.frombuffer(buf[-48:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_wrong_magic(tmp_path, grid):
    p = tmp_path / "f.bin"
    save_field(p, LogPermField(grid, np.zeros(grid.shape)))
    b = bytearray(p.read_bytes())
    b[:4] = b"XXXX"
    p.write_bytes(bytes(b))
    with pytest.raises(FormatError, match="format error"):
        load_field(p)


def test_truncated_payload(tmp_path, grid):
    p = tmp_path / "f.bin"
    save_field(p, LogPermField(grid, np.zeros(grid.shape)))
    p.write_bytes(p.read_bytes()[:-8])  # 4095 values
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        load_field(p)


def test_dimension_mismatch(tmp_path, grid):
    p = tmp_path / "f.bin"
    save_field(p, LogPermField(grid, np.zeros(grid.shape)))
    with pytest.raises(DimensionMismatchError):
        load_field(p, grid=GridSpec(32, 32))


def test_errors_are_distinct():
    assert len({FormatError, DimensionMismatchError, TruncatedPayloadError}) == 3
    assert not issubclass(FormatError, TruncatedPayloadError)


def test_ensemble_roundtrip(tmp_path):
    g = GridSpec(8, 5)
    e = Ensemble(g, RngStream(2).normal(2, 1, (7,) + g.shape), seed=9, tag="prior")
    p = tmp_path / "e.bin"
    save_ensemble(p, e)
    assert p.read_bytes()[:4] == b"CHEN"
    e2 = load_ensemble(p)
    assert len(e2) == 7 and e2.values.tobytes() == e.values.tobytes()


def test_csv_roundtrip(tmp_path):
    g = GridSpec(6, 4)
    f = LogPermField(g, RngStream(5).normal(2, 1, g.shape))
    p = tmp_path / "f.csv"
    export_csv(p, f)
    assert p.read_text().splitlines()[0] == "i,j,log10_k_mD"
    assert np.array_equal(import_csv(p, g).values, f.values)


def test_fork_determinism():
    a = RngStream(42).fork("a").standard_normal(100)
    b = RngStream(42).fork("a").standard_normal(100)
    assert np.array_equal(a, b)
    assert np.array_equal(rng_fork(RngStream(42), "a").standard_normal(100), a)


def test_fork_independence():
    p = RngStream(42)
    a = p.fork("a").standard_normal(10_000)
    b = p.fork("b").standard_normal(10_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_fork_chain_reproducible():
    def chain():
        return RngStream(7).fork("x").fork(3).fork("leaf").uniform(size=5)
    assert np.array_equal(chain(), chain())
    assert not np.array_equal(chain(), RngStream(8).fork("x").fork(3).fork("leaf").uniform(size=5))


def test_fork_does_not_consume_parent():
    p = RngStream(1)
    q = RngStream(1)
    p.fork("z")
    assert np.array_equal(p.standard_normal(4), q.standard_normal(4))


def test_stream_frozen_constants():
    # documented construction: PCG64(SeedSequence(entropy=seed, spawn_key=(lo32, hi32)))
    ss = np.random.SeedSequence(entropy=123, spawn_key=(5, 0))
    expect = np.random.Generator(np.random.PCG64(ss)).standard_normal(3)
    assert np.array_equal(RngStream(123, 5).standard_normal(3), expect)
