"""End-to-end history-matching sweep over localization methods and ensemble sizes."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..channelgen import generate_training_set
from ..esmda import make_loc_builder, run_esmda
from ..fieldcore import RngStream, load_ensemble, save_ensemble
from ..flowsim import five_spot, observe, simulate, simulate_ensemble, write_observations_csv, write_series_csv
from ..localization import save_taper_stack, write_taper_summary
from .config import ExperimentConfig

RECORD_FIELDS = ("iter", "rmse", "nv", "method", "Ne", "Ns")


def _num(x: float) -> str:
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# field sources

def diffusion_model(cfg: ExperimentConfig, rng: RngStream, log=None):
    """Load the configured score weights, or train a network on a channelgen training set."""
    from ..scorediff import dsm_train, load_weights

    if cfg.diffusion.weights is not None:
        return load_weights(cfg.diffusion.weights)
    grid = cfg.grid_spec()
    data = generate_training_set(cfg.diffusion.n_train, grid, rng.fork("training-set"), cfg.channel_prior())
    return dsm_train(data.values, cfg.network_spec(), cfg.schedule(), cfg.train_config(), rng.fork("train"), log=log)


def diffusion_fields(model, cfg: ExperimentConfig, n: int, rng: RngStream) -> np.ndarray:
    from ..scorediff import sample_ode, sample_pc

    d = cfg.diffusion
    lo, hi = cfg.esmda.bounds
    out = []
    for b, start in enumerate(range(0, n, d.batch)):
        m = min(d.batch, n - start)
        brng = rng.fork(f"batch-{b}")
        if d.sampler == "ode":
            x = sample_ode(model, cfg.schedule(), d.n_steps, brng, m)
        else:
            x = sample_pc(model, cfg.schedule(), d.n_steps, d.snr, brng, m)
        out.append(np.clip(x, lo, hi))
    return np.concatenate(out, axis=0)


def super_source(cfg: ExperimentConfig, log=None):
    """Callable ``(n, rng) -> (n, ny, nx)`` drawing super-ensemble fields from the configured source."""
    loc = cfg.localization
    grid = cfg.grid_spec()
    if loc.super_source == "file":
        pool = load_ensemble(loc.super_file, grid).values

        def from_file(n, rng):
            if n > pool.shape[0]:
                raise ValueError(f"super-ensemble file holds {pool.shape[0]} fields, {n} requested")
            return pool[:n]
        return from_file
    if loc.super_source == "channelgen":
        prior = cfg.channel_prior()
        return lambda n, rng: generate_training_set(n, grid, rng, prior, tag="super").values
    cache = {}

    def from_diffusion(n, rng):
        if "model" not in cache:
            cache["model"] = diffusion_model(cfg, rng.fork("model"), log)
        return diffusion_fields(cache["model"], cfg, n, rng.fork("samples"))
    return from_diffusion


# ---------------------------------------------------------------------------
# experiment

def _data_match_rows(days, n_wells, obs, truth, D0, D1):
    rows = []
    pct = lambda D, q: np.percentile(D, q, axis=0)
    stats = [D0.mean(axis=0), pct(D0, 10), pct(D0, 90), D1.mean(axis=0), pct(D1, 10), pct(D1, 90)]
    for k in range(obs.d_obs.size):
        rows.append([_num(days[k // n_wells]), k % n_wells, _num(obs.d_obs[k]), _num(truth[k])]
                    + [_num(s[k]) for s in stats])
    return rows


DATA_MATCH_FIELDS = ("report_day", "well", "observed", "truth", "prior_mean", "prior_p10", "prior_p90",
                     "post_mean", "post_p10", "post_p90")


def run_experiment(cfg: ExperimentConfig, out_dir, log=None, make_report: bool = True) -> dict:
    """Run every (method, N_e) cell and write the run directory.  Returns the manifest."""
    say = log or (lambda msg: None)
    out = Path(out_dir)
    for sub in ("ensembles", "data_match", "tapers"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    stage: dict[str, float] = {}
    t_all = time.perf_counter()

    grid = cfg.grid_spec()
    prior_spec = cfg.channel_prior()
    sim = cfg.sim_config()
    wells = five_spot(grid, sim.rate_m3_per_day, cfg.sim.monitor_offset)
    n_wells = sum(w.kind == "monitor" for w in wells)
    root = RngStream(cfg.seed)
    (out / "config.snapshot").write_text(json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2) + "\n")

    # synthetic truth from its own stream, never shared with any prior
    t0 = time.perf_counter()
    truth = generate_training_set(1, grid, root.fork("truth"), prior_spec, tag="truth")
    truth_series = simulate(truth.members[0], sim, wells)
    obs = observe(truth_series, cfg.noise_frac, root.fork("observation"))
    save_ensemble(out / "ensembles" / "truth.chf", truth)
    write_series_csv(out / "truth_series.csv", truth_series)
    write_observations_csv(out / "observations.csv", obs)
    stage["truth"] = time.perf_counter() - t0

    ml_methods = [m for m in cfg.methods if m.startswith("ml-")]
    n_s = cfg.localization.n_super
    source = super_source(cfg, log) if ml_methods else None
    shared = {}
    if ml_methods and not cfg.localization.regenerate_super:
        t0 = time.perf_counter()
        say(f"super-ensemble: {n_s} fields from {cfg.localization.super_source}")
        S = np.asarray(source(n_s, root.fork("super-ensemble")), dtype=np.float64)
        shared["S"] = S
        stage["super_ensemble"] = time.perf_counter() - t0

    forward = lambda Z: simulate_ensemble(Z, grid, sim, wells)
    records, timings = [], []
    nv_final: dict[tuple[str, int], float] = {}
    rmse_final: dict[tuple[str, int], float] = {}
    days = sim.report_days()
    for n_e in cfg.ensemble_sizes:
        t0 = time.perf_counter()
        prior = generate_training_set(n_e, grid, root.fork(f"prior-{n_e}"), prior_spec, tag="prior")
        save_ensemble(out / "ensembles" / f"prior_Ne{n_e}.chf", prior)
        D_prior = forward(prior.matrix())
        stage[f"prior_Ne{n_e}"] = time.perf_counter() - t0
        for method in cfg.methods:
            t0 = time.perf_counter()
            say(f"N_e={n_e} method={method}")
            esmda_cfg = cfg.esmda_config(method)
            ml = method.startswith("ml-")
            if ml and "S" in shared:
                src = lambda n, rng, S=shared["S"]: S[:n]
            else:
                src = source
            builder = make_loc_builder(
                method, grid, wells, eta=cfg.localization.eta, gc_half_support=cfg.localization.gc_half_support,
                n_times=sim.n_reports, super_source=src, n_s=n_s if ml else 0,
                regenerate=cfg.localization.regenerate_super,
                proxy_params=(getattr(cfg.localization.proxy_params, method[3:]) or None) if ml else None,
                rng=root.fork(f"super-{n_e}"))
            last = {}

            def fwd(Z, prior_Z=prior.matrix()):
                if Z is prior_Z or (Z.shape == prior_Z.shape and np.array_equal(Z, prior_Z)):
                    return D_prior
                return forward(Z)

            def on_iter(rec, Z, D):
                last["D"] = D

            post, recs = run_esmda(esmda_cfg, prior, fwd, obs, builder, root.fork(f"esmda-{n_e}"),
                                   n_s=n_s if ml else 0, on_iteration=on_iter)
            tag = f"{method}_Ne{n_e}"
            save_ensemble(out / "ensembles" / f"posterior_{tag}.chf", post.with_values(post.values, tag=tag))
            for r in recs:
                records.append([r.iteration, _num(r.rmse), _num(r.nv), method, n_e, r.n_s])
                timings.append([method, n_e, r.iteration, _num(r.seconds["simulate"]),
                                _num(r.seconds["localize"]), _num(r.seconds["update"])])
            nv_final[method, n_e] = recs[-1].nv
            rmse_final[method, n_e] = recs[-1].rmse
            write_csv(out / "data_match" / f"{tag}.csv", DATA_MATCH_FIELDS,
                      _data_match_rows(days, n_wells, obs, truth_series.flat, D_prior, last["D"]))
            L = getattr(builder, "last_taper", None)
            if L is not None:
                save_taper_stack(out / "tapers" / f"{tag}.chf", L, grid)
                write_taper_summary(out / "tapers" / f"{tag}.csv", L, n_wells)
            stage[f"esmda_{tag}"] = time.perf_counter() - t0

    write_csv(out / "records.csv", RECORD_FIELDS, records)
    write_csv(out / "timings.csv", ("method", "Ne", "iter", "simulate", "localize", "update"), timings)
    header = ["method"] + [f"Ne{n}" for n in cfg.ensemble_sizes]
    write_csv(out / "nv_table.csv", header,
              [[m] + [_num(nv_final[m, n]) for n in cfg.ensemble_sizes] for m in cfg.methods])
    write_csv(out / "rmse_table.csv", header,
              [[m] + [_num(rmse_final[m, n]) for n in cfg.ensemble_sizes] for m in cfg.methods])
    if make_report:
        from .report import build_report

        t0 = time.perf_counter()
        build_report(out)
        stage["report"] = time.perf_counter() - t0
    stage["total"] = time.perf_counter() - t_all
    return write_manifest(out, cfg, stage)


def write_manifest(out: Path, cfg: ExperimentConfig, stage: dict) -> dict:
    inventory = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in ("manifest", "manifest.tmp"):
            inventory.append({"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size,
                              "sha256": _sha256(p)})
    manifest = {"config_hash": cfg.config_hash(), "artifact_version": __version__, "seed": cfg.seed,
                "timings": stage, "files": inventory}
    atomic_write_text(out / "manifest", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
