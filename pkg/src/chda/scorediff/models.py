"""Score-model backends, per-pixel normalization and the weight-file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import NetworkSpec, ScoreNet
from .schedule import VESchedule

WEIGHTS_MAGIC = b"CHSW"
WEIGHTS_VERSION = 2


@dataclass(frozen=True)
class NormStats:
    """Per-pixel mean and std of the training set (physical log10 k)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_data(cls, data: np.ndarray) -> NormStats:
        data = np.asarray(data, dtype=np.float64)
        return cls(data.mean(axis=0), data.std(axis=0))

    @classmethod
    def identity(cls, shape) -> NormStats:
        return cls(np.zeros(shape), np.ones(shape))

    @property
    def scale(self) -> np.ndarray:
        # zero-variance pixels pass through unscaled
        return np.where(self.std > 0.0, self.std, 1.0)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.mean


def normalize(x, stats: NormStats):
    return stats.normalize(x)


def denormalize(y, stats: NormStats):
    return stats.denormalize(y)


class ScoreModel:
    """Common interface: ``score(x_t, t)`` on batches of normalized fields."""

    backend = "abstract"
    stats: NormStats | None = None
    shape: tuple[int, int]

    def score(self, x, t, sched: VESchedule) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    @property
    def center(self) -> np.ndarray:
        """Mean of the data in model space; the terminal marginal is centered here."""
        return np.zeros(self.shape)

    def _prep(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        xb = x[None] if single else x
        if xb.shape[1:] != tuple(self.shape):
            raise ValueError(f"field shape {xb.shape[1:]} does not match model shape {self.shape}")
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        if np.any(tb <= 0.0):
            raise ValueError("t must be positive")
        return xb, tb, single

    def tweedie(self, x, t, sched: VESchedule = VESchedule()) -> np.ndarray:
        """Denoised estimate x_t + sigma_t^2 s(x_t, t)."""
        xb, tb, single = self._prep(x, t)
        s2 = np.asarray(sched.sigma_t(tb))[:, None, None] ** 2
        out = xb + s2 * self.score(xb, tb, sched)
        return out[0] if single else out


class GaussianScore(ScoreModel):
    """Data distribution N(mean, variance) per pixel, independent pixels."""

    backend = "analytic-gaussian"

    def __init__(self, mean, variance, stats: NormStats | None = None):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.shape = self.mean.shape
        self.variance = np.broadcast_to(np.asarray(variance, dtype=np.float64), self.shape)
        if np.any(self.variance < 0.0):
            raise ValueError("variance must be non-negative")
        self.stats = stats

    @property
    def center(self) -> np.ndarray:
        return self.mean

    def score(self, x, t, sched: VESchedule = VESchedule()):
        xb, tb, single = self._prep(x, t)
        s2 = np.asarray(sched.sigma_t(tb))[:, None, None] ** 2
        out = -(xb - self.mean) / (self.variance + s2)
        return out[0] if single else out


class PointMassScore(ScoreModel):
    backend = "analytic-pointmass"

    def __init__(self, x0, stats: NormStats | None = None):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.shape = self.x0.shape
        self.stats = stats

    @property
    def center(self) -> np.ndarray:
        return self.x0

    def score(self, x, t, sched: VESchedule = VESchedule()):
        xb, tb, single = self._prep(x, t)
        s2 = np.asarray(sched.sigma_t(tb))[:, None, None] ** 2
        out = -(xb - self.x0) / s2
        return out[0] if single else out


class NetworkScore(ScoreModel):
    backend = "trained-network"

    def __init__(self, net: ScoreNet, shape, stats: NormStats | None = None, batch: int = 256):
        self.net = net
        self.shape = tuple(shape)
        self.stats = stats if stats is not None else NormStats.identity(self.shape)
        self.batch = batch

    @property
    def spec(self) -> NetworkSpec:
        return self.net.spec

    def score(self, x, t, sched: VESchedule = VESchedule()):
        xb, tb, single = self._prep(x, t)
        s = np.asarray(sched.sigma_t(tb))[:, None, None]
        out = np.empty_like(xb)
        for lo in range(0, xb.shape[0], self.batch):
            hi = lo + self.batch
            out[lo:hi] = self.net.output(xb[lo:hi], tb[lo:hi], s[lo:hi])
        out /= s
        return out[0] if single else out


def score(model: ScoreModel, x_t, t, sched: VESchedule = VESchedule()) -> np.ndarray:
    return model.score(x_t, t, sched)


# ---------------------------------------------------------------------------
# weight files
#
# magic "CHSW", u16 version, u32 ny, u32 nx, u32 descriptor length, descriptor
# (UTF-8 JSON of NetworkSpec), u64 init seed, f64 fourier frequencies,
# f64 normalization mean and std (ny*nx each), f64 weights in declaration order.

_HEAD = struct.Struct("<4sHIII")


def save_weights(path, model: NetworkScore, init_seed: int = 0) -> None:
    desc = model.spec.to_json().encode("utf-8")
    ny, nx = model.shape
    parts = [_HEAD.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, ny, nx, len(desc)), desc,
             struct.pack("<Q", init_seed),
             model.net.fourier_W.astype("<f8").tobytes(),
             np.ascontiguousarray(model.stats.mean, dtype="<f8").tobytes(),
             np.ascontiguousarray(model.stats.std, dtype="<f8").tobytes(),
             model.net.get_flat().astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> NetworkScore:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size or buf[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a score-weight file")
    _, version, ny, nx, dlen = _HEAD.unpack_from(buf, 0)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weight-file version {version}")
    off = _HEAD.size
    spec = NetworkSpec.from_json(buf[off:off + dlen].decode("utf-8"))
    off += dlen + 8
    net = ScoreNet(spec)
    rest = np.frombuffer(buf, dtype="<f8", offset=off)
    nf, npix = net.fourier_W.size, ny * nx
    expect = nf + 2 * npix + net.n_params()
    if rest.size != expect:
        raise ValueError(f"{path}: expected {expect} values, found {rest.size}")
    net.fourier_W = rest[:nf].copy()
    stats = NormStats(rest[nf:nf + npix].reshape(ny, nx).copy(),
                      rest[nf + npix:nf + 2 * npix].reshape(ny, nx).copy())
    net.set_flat(rest[nf + 2 * npix:])
    return NetworkScore(net, (ny, nx), stats)
