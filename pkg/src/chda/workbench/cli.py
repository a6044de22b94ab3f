"""Command-line entry point: ``chda <subcommand> [--config C] [--seed S] [--out DIR] [--threads N]``.

Exit codes: 0 success, 2 configuration or input-file error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from ..fieldcore import FieldIOError, RngStream, load_ensemble, load_field, save_ensemble, save_field
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import write_csv, write_manifest
from .report import ReportError, build_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("chda")


class InputError(Exception):
    pass


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="JSON experiment configuration")
    p.add_argument("--seed", type=int, default=default, help="override the master seed")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--threads", type=int, default=default, help="cap BLAS/OpenMP threads")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chda", description=__doc__.splitlines()[0])
    _global_flags(ap, None)
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = sub.add_parser("generate-prior", parents=[common], help="draw a channelized prior ensemble")
    p.add_argument("--n", type=int, default=None, help="ensemble size (default: config n_prior)")

    p = sub.add_parser("train-score", parents=[common], help="train a score network on a field dataset")
    p.add_argument("--dataset", required=True, help="ensemble file or directory of field files")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("sample", parents=[common], help="draw fields from a score model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="trained score-weight file")
    src.add_argument("--analytic", help="gaussian:MEAN:VAR or point-mass:VALUE in log10 k")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sampler", choices=("ode", "pc", "posterior"), default="ode")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--obs", default=None, help="CSV with columns cell,value for posterior mode")
    p.add_argument("--obs-sigma", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=1.0)

    sub.add_parser("run-experiment", parents=[common], help="run the method x ensemble-size sweep")

    p = sub.add_parser("report", parents=[common], help="rebuild SVG/CSV figures for a run directory")
    p.add_argument("run_dir", nargs="?", default=None)
    return ap


# ---------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed} if args.seed is not None else None
    return load_config(args.config, overrides)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_prior(args) -> int:
    from ..channelgen import generate_training_set

    cfg = _config(args)
    n = args.n if args.n is not None else cfg.n_prior
    if n < 1:
        raise ConfigError("--n must be >= 1")
    out = _out(args, "prior")
    ens = generate_training_set(n, cfg.grid_spec(), RngStream(cfg.seed).fork(f"prior-{n}"), cfg.channel_prior())
    width = max(4, len(str(n - 1)))
    for j, f in enumerate(ens.members):
        save_field(out / f"field_{j:0{width}d}.chf", f)
    (out / "config.snapshot").write_text(json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2) + "\n")
    write_manifest(out, cfg, {})
    log.info("wrote %d fields to %s", n, out)
    return EXIT_OK


def _load_dataset(path: str) -> np.ndarray:
    """An ensemble file, a single field file, or a directory of field files."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.chf"))
        if not files:
            raise InputError(f"no field files in {p}")
        return np.stack([load_field(f).values for f in files])
    if not p.is_file():
        raise InputError(f"dataset not found: {p}")
    try:
        return load_ensemble(p).values
    except FieldIOError:
        return load_field(p).values[None]


def cmd_train_score(args) -> int:
    from ..scorediff import dsm_train, save_weights
    from ..scorediff.models import NormStats

    cfg = _config(args)
    data = _load_dataset(args.dataset)
    if args.resume is not None and not Path(args.resume).is_file():
        raise InputError(f"checkpoint not found: {args.resume}")
    tcfg = cfg.train_config()
    if args.epochs is not None:
        from dataclasses import replace
        tcfg = replace(tcfg, epochs=args.epochs)
    out = _out(args, "score")
    stats = None
    if args.resume is not None:
        ck = np.load(args.resume)
        stats = NormStats(np.array(ck["stats_mean"]), np.array(ck["stats_std"]))
    model = dsm_train(data, cfg.network_spec(), cfg.schedule(), tcfg, RngStream(cfg.seed).fork("score-train"),
                      stats=stats, checkpoint_path=out / "checkpoint.npz", resume_from=args.resume,
                      log=lambda m: log.info(m))
    save_weights(out / "weights.chsw", model, init_seed=cfg.seed)
    model.history.write_csv(out / "loss.csv")
    write_manifest(out, cfg, {})
    return EXIT_OK


def _analytic_model(spec: str, shape):
    from ..scorediff import GaussianScore, PointMassScore

    parts = spec.split(":")
    try:
        if parts[0] == "gaussian" and len(parts) == 3:
            return GaussianScore(np.full(shape, float(parts[1])), np.full(shape, float(parts[2])))
        if parts[0] == "point-mass" and len(parts) == 2:
            return PointMassScore(np.full(shape, float(parts[1])))
    except ValueError:
        pass
    raise ConfigError(f"bad --analytic spec {spec!r}; expected gaussian:MEAN:VAR or point-mass:VALUE")


def _read_obs(path, sigma):
    from ..scorediff import Observations

    if path is None:
        return Observations.empty()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"observation file not found: {p}")
    raw = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    return Observations(raw[:, 0].astype(np.int64), raw[:, 1], sigma)


def cmd_sample(args) -> int:
    from ..channelgen import channel_fraction
    from ..fieldcore import Ensemble
    from ..scorediff import load_weights, sample_diagnostics, sample_ode, sample_pc, sample_posterior

    cfg = _config(args)
    grid = cfg.grid_spec()
    if args.weights is not None:
        if not Path(args.weights).is_file():
            raise InputError(f"weights not found: {args.weights}")
        model = load_weights(args.weights)
        if tuple(model.shape) != grid.shape:
            raise ConfigError(f"weights are for a {model.shape} grid, config has {grid.shape}")
    else:
        model = _analytic_model(args.analytic, grid.shape)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    obs = _read_obs(args.obs, args.obs_sigma)
    sched = cfg.schedule()
    rng = RngStream(cfg.seed).fork(f"sample-{args.sampler}")
    steps = args.steps or cfg.diffusion.n_steps
    lo, hi = cfg.esmda.bounds
    out = _out(args, "samples")
    chunks = []
    for b, start in enumerate(range(0, args.n, cfg.diffusion.batch)):
        m = min(cfg.diffusion.batch, args.n - start)
        brng = rng.fork(f"batch-{b}")
        if args.sampler == "ode":
            x = sample_ode(model, sched, steps, brng, m)
        elif args.sampler == "pc":
            x = sample_pc(model, sched, steps, cfg.diffusion.snr, brng, m)
        else:
            x = sample_posterior(model, obs, args.gamma, sched, steps, cfg.diffusion.snr, brng, m, bounds=(lo, hi))
        chunks.append(np.clip(x, lo, hi))
    X = np.concatenate(chunks)
    save_ensemble(out / "samples.chf", Ensemble(grid, X, seed=cfg.seed, tag=f"diffusion-{args.sampler}"))
    prop = np.atleast_1d(channel_fraction(X))
    lo_k, hi_k = np.log10(10.0), np.log10(1e4)
    in_range = ((X >= lo_k) & (X <= hi_k)).mean(axis=(1, 2))
    write_csv(out / "diagnostics.csv", ["member", "channel_proportion", "in_range_fraction"],
              [[j, repr(float(p)), repr(float(r))] for j, (p, r) in enumerate(zip(prop, in_range))])
    log.info("sample diagnostics: %s", sample_diagnostics(X))
    write_manifest(out, cfg, {})
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    out = _out(args, "run")
    run_experiment(cfg, out, log=lambda m: log.info(m))
    return EXIT_OK


def cmd_report(args) -> int:
    run = args.run_dir or args.out
    if run is None:
        raise InputError("report needs a run directory")
    if not Path(run).is_dir():
        raise InputError(f"run directory not found: {run}")
    build_report(run)
    return EXIT_OK


COMMANDS = {"generate-prior": cmd_generate_prior, "train-score": cmd_train_score, "sample": cmd_sample,
            "run-experiment": cmd_run_experiment, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    limit = nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=max(1, args.threads))
    t0 = time.perf_counter()
    try:
        with limit:
            code = COMMANDS[args.command](args)
    except (ConfigError, InputError, FieldIOError, FileNotFoundError, ReportError) as exc:
        print(f"chda {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 3
        print(f"chda {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
