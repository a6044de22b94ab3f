"""Denoising score-matching training loop with checkpoint/resume."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..fieldcore import Ensemble, RngStream
from .models import NetworkScore, NormStats
from .network import NetworkSpec, ScoreNet
from .schedule import VESchedule


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "sgd"        # sgd (momentum) | adam
    lr: float = 1e-4              # cosine decay from lr to lr_min
    lr_min: float = 1e-6
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float | None = 1.0
    patience: int | None = None   # early stop after this many epochs without improvement
    min_delta: float = 0.0
    keep_best: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (self.lr > 0 and self.lr_min >= 0):
            raise ValueError("learning rates must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    best_loss: list = field(default_factory=list)
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "best_loss"])
            for e, (l, b) in enumerate(zip(self.epoch_loss, self.best_loss), start=1):
                w.writerow([e, repr(float(l)), repr(float(b))])


class _Optimizer:
    def __init__(self, cfg: TrainConfig, n: int, total_steps: int):
        self.cfg = cfg
        self.total = max(total_steps, 1)
        self.step_count = 0
        self.m = np.zeros(n)
        self.v = np.zeros(n) if cfg.optimizer == "adam" else None

    def lr(self) -> float:
        c = self.cfg
        frac = min(self.step_count / self.total, 1.0)
        return c.lr_min + 0.5 * (c.lr - c.lr_min) * (1.0 + math.cos(math.pi * frac))

    def step(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        c = self.cfg
        if c.grad_clip is not None:
            gn = float(np.sqrt(g @ g))
            if gn > c.grad_clip:
                g = g * (c.grad_clip / gn)
        lr = self.lr()
        self.step_count += 1
        if c.optimizer == "sgd":
            self.m = c.momentum * self.m + g
            return w - lr * self.m
        k = self.step_count
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g
        mh = self.m / (1.0 - c.beta1 ** k)
        vh = self.v / (1.0 - c.beta2 ** k)
        return w - lr * mh / (np.sqrt(vh) + 1e-8)

    def state(self) -> dict:
        out = {"step_count": np.array(self.step_count), "m": self.m}
        if self.v is not None:
            out["v"] = self.v
        return out

    def load(self, st) -> None:
        self.step_count = int(st["step_count"])
        self.m = np.array(st["m"])
        if self.v is not None:
            self.v = np.array(st["v"])


def _as_array(data) -> np.ndarray:
    if isinstance(data, Ensemble):
        return np.asarray(data.values, dtype=np.float64)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("training data must be (n, ny, nx)")
    return arr


def _batch_draws(rng: RngStream, n: int, shape, sched: VESchedule):
    t = rng.uniform(sched.eps, sched.T, size=n)
    eps = rng.standard_normal((n,) + tuple(shape))
    return t, eps


def evaluate_loss(model: NetworkScore, data, sched: VESchedule, rng: RngStream, n_draws: int = 1) -> float:
    """Mean DSM loss over the data set with draws from ``rng`` (no update)."""
    x = model.stats.normalize(_as_array(data))
    total, count = 0.0, 0
    for _ in range(n_draws):
        t, eps = _batch_draws(rng, x.shape[0], x.shape[1:], sched)
        s = np.asarray(sched.sigma_t(t))
        for lo in range(0, x.shape[0], 256):
            sl = slice(lo, lo + 256)
            out = model.net.output(x[sl] + s[sl, None, None] * eps[sl], t[sl], s[sl])
            total += float(np.sum((eps[sl] + out) ** 2))
            count += out.shape[0]
    return total / count


def save_checkpoint(path, net: ScoreNet, opt: _Optimizer, epoch: int, history: TrainHistory,
                    best_w: np.ndarray, stats: NormStats, cfg: TrainConfig) -> None:
    st = opt.state()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, weights=net.get_flat(), fourier_W=net.fourier_W, epoch=np.array(epoch),
                 epoch_loss=np.array(history.epoch_loss, dtype=np.float64),
                 best_loss=np.array(history.best_loss, dtype=np.float64),
                 best_weights=best_w, stats_mean=stats.mean, stats_std=stats.std,
                 spec=np.array(net.spec.to_json()), train_cfg=np.array(json.dumps(asdict(cfg))),
                 **{f"opt_{k}": v for k, v in st.items()})
    tmp.replace(path)


def dsm_train(data, spec: NetworkSpec = NetworkSpec(), sched: VESchedule = VESchedule(),
              cfg: TrainConfig = TrainConfig(), rng: RngStream | None = None,
              stats: NormStats | None = None, checkpoint_path=None, checkpoint_every: int = 1,
              resume_from=None, log=None) -> NetworkScore:
    """Train a score network on ``data`` (physical log10 k, shape (n, ny, nx)).

    The returned model carries ``history`` (TrainHistory) and ``initial_weights``.
    Every epoch draws its shuffle, times and noise from ``rng.fork("epoch-<e>")``,
    so a run resumed from a checkpoint replays the remaining epochs exactly.
    """
    rng = RngStream(0) if rng is None else rng
    x_raw = _as_array(data)
    if x_raw.shape[0] < 1:
        raise ValueError("training data is empty")
    stats = NormStats.from_data(x_raw) if stats is None else stats
    x = stats.normalize(x_raw)
    n = x.shape[0]
    nb = math.ceil(n / cfg.batch_size)

    net = ScoreNet(spec, rng.fork("init").generator)
    init_w = net.get_flat().copy()
    opt = _Optimizer(cfg, net.n_params(), cfg.epochs * nb)
    history = TrainHistory()
    best_w = init_w.copy()
    start = 0
    if resume_from is not None:
        ck = np.load(resume_from)
        if str(ck["spec"]) != spec.to_json():
            raise TrainingError("checkpoint network spec differs from the requested spec")
        net.set_flat(ck["weights"])
        net.fourier_W = np.array(ck["fourier_W"])
        opt.load({k[4:]: ck[k] for k in ck.files if k.startswith("opt_")})
        history.epoch_loss = list(ck["epoch_loss"])
        history.best_loss = list(ck["best_loss"])
        best_w = np.array(ck["best_weights"])
        start = int(ck["epoch"])

    stale = 0
    if history.epoch_loss:
        stale = len(history.epoch_loss) - 1 - int(np.argmin(history.epoch_loss))
    for epoch in range(start, cfg.epochs):
        erng = rng.fork(f"epoch-{epoch}")
        perm = erng.permutation(n)
        t_all, eps_all = _batch_draws(erng, n, x.shape[1:], sched)
        sig_all = np.asarray(sched.sigma_t(t_all))
        total = 0.0
        for b in range(nb):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grad = net.loss_and_grad(x[idx], t_all[idx], eps_all[idx], sig_all[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}, batch {b}, "
                                    f"lr {opt.lr():.3e}")
            net.set_flat(opt.step(net.get_flat(), grad))
            total += loss * idx.size
        epoch_loss = total / n
        prev_best = history.best_loss[-1] if history.best_loss else math.inf
        if epoch_loss < prev_best - cfg.min_delta:
            best_w = net.get_flat().copy()
            stale = 0
        else:
            stale += 1
        history.epoch_loss.append(epoch_loss)
        history.best_loss.append(min(prev_best, epoch_loss))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_loss:.6f} lr {opt.lr():.3e}")
        if checkpoint_path is not None and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, net, opt, epoch + 1, history, best_w, stats, cfg)
        if cfg.patience is not None and stale >= cfg.patience:
            history.stopped_early = True
            break

    if cfg.keep_best and history.epoch_loss:
        net.set_flat(best_w)
    model = NetworkScore(net, x.shape[1:], stats)
    model.history = history
    model.initial_weights = init_w
    return model
