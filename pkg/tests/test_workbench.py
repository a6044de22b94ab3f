import csv
import json

import numpy as np
import pytest

from chda.fieldcore import load_ensemble, load_field
from chda.workbench import ConfigError, ReportError, build_report, load_config, run_experiment
from chda.workbench.cli import main

SMOKE = {
    "seed": 3,
    "grid": {"nx": 12, "ny": 12, "dx": 20.0, "dy": 20.0},
    "channel": {"channel_thickness": 0.4},
    "sim": {"monitor_offset": 3},
    "localization": {"n_super": 60, "super_source": "channelgen", "gc_half_support": 60.0,
                     "proxy_params": {"rf": {"n_estimators": 4}, "gbt": {"n_estimators": 4}}},
    "ensemble_sizes": [12, 16],
    "methods": ["none", "gc", "po", "ml-linear", "ml-rf", "ml-gbt"],
}
TINY = {"seed": 1, "grid": {"nx": 8, "ny": 8, "dx": 40.0, "dy": 40.0},
        "diffusion": {"network": {"channels": 3, "n_blocks": 1, "embed_dim": 4},
                      "train": {"epochs": 2, "batch_size": 8}, "n_steps": 20}}


def _write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg = load_config(overrides=SMOKE)
    run_experiment(cfg, base / "a")
    run_experiment(cfg, base / "b")
    return base / "a", base / "b", cfg


# -- config -------------------------------------------------------------------

def test_defaults_validate():
    cfg = load_config()
    assert cfg.ensemble_sizes == [50, 100, 200, 500, 1000]
    assert cfg.localization.n_super == 5000 and cfg.esmda.alphas == [4.0] * 4
    assert cfg.grid_spec().shape == (64, 64)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="Extra inputs"):
        load_config(_write(tmp_path, "c.json", {"grid": {"nx": 8, "colour": 1}}))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "c.json", {"typo": 1}))


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides={"esmda": {"n_assimilations": 2, "alphas": [4.0, 4.0]}})
    with pytest.raises(ConfigError):
        load_config(overrides={"methods": ["none", "kriging"]})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_referenced_files_must_exist(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(_write(tmp_path, "c.json", {"diffusion": {"weights": "nope.chsw"}}))
    with pytest.raises(ConfigError):
        load_config(overrides={"localization": {"super_source": "file"}})


def test_config_hash_tracks_semantic_changes():
    a = load_config(overrides={"seed": 1})
    b = load_config(overrides={"seed": 1, "methods": ["none", "gaspari-cohn", "pseudo-optimal", "ml-linear",
                                                      "ml-rf", "ml-gbt"]})
    c = load_config(overrides={"seed": 2})
    d = load_config(overrides={"seed": 1, "methods": ["none", "gc", "po", "ml-linear", "ml-rf", "ml-gbt"]})
    assert a.config_hash() == b.config_hash() == d.config_hash()
    assert a.config_hash() != c.config_hash()


# -- experiment -----------------------------------------------------------------

def test_run_directory_layout(runs):
    a, _, cfg = runs
    for name in ("config.snapshot", "manifest", "records.csv", "timings.csv", "nv_table.csv", "rmse_table.csv",
                 "ensembles", "report"):
        assert (a / name).exists(), name
    man = json.loads((a / "manifest").read_text())
    assert man["config_hash"] == cfg.config_hash()
    assert {"records.csv", "nv_table.csv"} <= {f["path"] for f in man["files"]}


def test_tables_have_method_rows_and_size_columns(runs):
    a, _, _ = runs
    with open(a / "nv_table.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "Ne12", "Ne16"]
    assert [r[0] for r in rows[1:]] == ["none", "gaspari-cohn", "pseudo-optimal", "ml-linear", "ml-rf", "ml-gbt"]
    with open(a / "records.csv") as fh:
        recs = list(csv.DictReader(fh))
    assert list(recs[0]) == ["iter", "rmse", "nv", "method", "Ne", "Ns"]
    assert len(recs) == 6 * 2 * 5
    assert {r["Ns"] for r in recs if r["method"] == "none"} == {"0"}
    assert {r["Ns"] for r in recs if r["method"] == "ml-rf"} == {"60"}


def test_numeric_outputs_are_byte_identical(runs):
    a, b, _ = runs
    for name in ("records.csv", "nv_table.csv", "rmse_table.csv", "report/nv_bars.svg", "report/nv_bars.csv",
                 "ensembles/posterior_ml-gbt_Ne16.chf", "tapers/ml-rf_Ne12.chf"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_truth_not_in_prior(runs):
    a, _, _ = runs
    truth = load_ensemble(a / "ensembles" / "truth.chf").values[0]
    for n in (12, 16):
        prior = load_ensemble(a / "ensembles" / f"prior_Ne{n}.chf").values
        assert not any(np.array_equal(truth, p) for p in prior)


def test_every_svg_has_sibling_csv(runs):
    a, _, _ = runs
    svgs = sorted((a / "report").glob("*.svg"))
    assert svgs
    for s in svgs:
        assert s.with_suffix(".csv").is_file(), s.name
        assert s.read_text().startswith("<svg")
    assert (a / "report" / "taper_ml-rf_Ne16_well0.svg").is_file()


def test_report_is_deterministic_and_consistent(runs, tmp_path):
    a, _, _ = runs
    before = (a / "report" / "rmse_iter_Ne12.svg").read_bytes()
    build_report(a)
    assert (a / "report" / "rmse_iter_Ne12.svg").read_bytes() == before
    with open(a / "report" / "nv_bars.csv") as fh:
        bars = {(r["method"], r["Ne"]): r["nv"] for r in csv.DictReader(fh)}
    with open(a / "nv_table.csv") as fh:
        for r in csv.DictReader(fh):
            assert bars[r["method"], "12"] == r["Ne12"]


def test_report_on_empty_run_dir(tmp_path):
    with pytest.raises(ReportError, match="no records"):
        build_report(tmp_path)


# -- CLI ------------------------------------------------------------------------

def test_cli_generate_prior(tmp_path):
    cfg = _write(tmp_path, "c.json", TINY)
    assert main(["generate-prior", "--config", str(cfg), "--out", str(tmp_path / "p1"), "--n", "50"]) == 0
    files = sorted((tmp_path / "p1").glob("field_*.chf"))
    assert len(files) == 50 and (tmp_path / "p1" / "manifest").is_file()
    assert main(["generate-prior", "--config", str(cfg), "--out", str(tmp_path / "p2"), "--n", "50"]) == 0
    assert all(f.read_bytes() == (tmp_path / "p2" / f.name).read_bytes() for f in files)
    assert main(["generate-prior", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "p3"),
                 "--n", "3"]) == 0
    assert not np.array_equal(load_field(tmp_path / "p3" / "field_0000.chf").values,
                              load_field(files[0]).values)


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, "bad.json", {"grid": {"nx": 8}, "extra": True})
    assert main(["generate-prior", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "schema error" in capsys.readouterr().err


def test_cli_train_and_sample(tmp_path):
    cfg = _write(tmp_path, "c.json", TINY)
    assert main(["generate-prior", "--config", str(cfg), "--out", str(tmp_path / "ds"), "--n", "16"]) == 0
    assert main(["train-score", "--config", str(cfg), "--dataset", str(tmp_path / "ds"),
                 "--out", str(tmp_path / "sc")]) == 0
    with open(tmp_path / "sc" / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    best = [float(r["best_loss"]) for r in rows]
    assert best == sorted(best, reverse=True)
    assert main(["sample", "--config", str(cfg), "--weights", str(tmp_path / "sc" / "weights.chsw"),
                 "--n", "5", "--out", str(tmp_path / "s1")]) == 0
    assert main(["sample", "--config", str(cfg), "--weights", str(tmp_path / "sc" / "weights.chsw"),
                 "--n", "5", "--out", str(tmp_path / "s2")]) == 0
    x = load_ensemble(tmp_path / "s1" / "samples.chf").values
    assert x.shape == (5, 8, 8) and x.min() >= 1.0 and x.max() <= 4.0
    assert (tmp_path / "s1" / "samples.chf").read_bytes() == (tmp_path / "s2" / "samples.chf").read_bytes()


def test_cli_missing_dataset_is_file_error(tmp_path):
    cfg = _write(tmp_path, "c.json", TINY)
    assert main(["train-score", "--config", str(cfg), "--dataset", str(tmp_path / "none"),
                 "--out", str(tmp_path / "sc")]) == 2


def test_cli_posterior_sample_with_analytic_backend(tmp_path):
    cfg = _write(tmp_path, "c.json", TINY)
    (tmp_path / "obs.csv").write_text("cell,value\n0,2.0\n9,3.0\n")
    assert main(["sample", "--config", str(cfg), "--analytic", "gaussian:2.5:0.3", "--sampler", "posterior",
                 "--obs", str(tmp_path / "obs.csv"), "--steps", "200", "--n", "4", "--out", str(tmp_path / "s")]) == 0
    x = load_ensemble(tmp_path / "s" / "samples.chf").values.reshape(4, -1)
    assert np.max(np.abs(x[:, [0, 9]] - [2.0, 3.0])) < 0.05
    assert main(["sample", "--config", str(cfg), "--analytic", "cauchy:1", "--n", "2",
                 "--out", str(tmp_path / "s")]) == 2


def test_cli_report_no_records(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "no records" in capsys.readouterr().err


def test_cli_threads_flag(tmp_path):
    cfg = _write(tmp_path, "c.json", TINY)
    assert main(["generate-prior", "--config", str(cfg), "--threads", "1", "--out", str(tmp_path / "p"),
                 "--n", "2"]) == 0
