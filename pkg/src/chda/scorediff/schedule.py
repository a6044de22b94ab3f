"""Variance-exploding noise schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..fieldcore import RngStream

EPS_T = 1e-3  # lower time cutoff used in training and sampling


@dataclass(frozen=True)
class VESchedule:
    sigma: float = 25.0
    T: float = 1.0
    eps: float = EPS_T

    def __post_init__(self):
        if not self.sigma > 1.0:
            raise ValueError("sigma must exceed 1")
        if not self.T > 0.0:
            raise ValueError("T must be positive")
        if not 0.0 <= self.eps < self.T:
            raise ValueError("eps must lie in [0, T)")

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.T) or not np.all(np.isfinite(t)):
            raise ValueError(f"t must lie in [0, {self.T}]")
        return t

    def sigma_t(self, t):
        t = self._check(t)
        s = np.sqrt(np.expm1(2.0 * t * math.log(self.sigma)) / (2.0 * math.log(self.sigma)))
        return float(s) if s.ndim == 0 else s

    def g(self, t):
        """Diffusion coefficient g(t) = sigma**t."""
        t = self._check(t)
        out = self.sigma ** t
        return float(out) if np.ndim(out) == 0 else out

    def sigma_T(self) -> float:
        return self.sigma_t(self.T)


def sigma_t(t, sched: VESchedule = VESchedule()):
    return sched.sigma_t(t)


def perturb(x0: np.ndarray, t, rng: RngStream, sched: VESchedule = VESchedule()) -> np.ndarray:
    """Draw x_t ~ N(x0, sigma_t^2 I)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0.0):
        raise ValueError("t must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    s = np.asarray(sched.sigma_t(t_arr))
    if s.ndim == 1:
        s = s.reshape((-1,) + (1,) * (x0.ndim - 1))
    return x0 + s * rng.standard_normal(x0.shape)
