"""Object-based generator of two-facies channelized log-permeability maps.

Each channel is a sinuous band: centreline ``v = v0 + A sin(2 pi u / wavelength + phase)``
in a frame rotated by the channel orientation, with a width that swells and
narrows along ``u`` at the undulation wavelength.  Channels are stacked until
the channel fraction first reaches the target proportion.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .fieldcore import Ensemble, GridSpec, LogPermField, RngStream

CHANNEL_MD = 2000.0
BACKGROUND_MD = 50.0


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def draw(self, rng: RngStream) -> float:
        if self.std == 0.0:
            return float(self.mean)
        return float(rng.normal(self.mean, self.std))


@dataclass(frozen=True)
class ChannelPrior:
    """Normal distributions for the per-realization channel parameters."""

    orientation: Normal = Normal(90.0, 30.0)          # degrees from +x, counter-clockwise
    amplitude: Normal = Normal(250.0, 10.0)           # m
    wavelength: Normal = Normal(2000.0, 50.0)         # m
    width_thickness_ratio: Normal = Normal(50.0, 5.0)
    channel_proportion: Normal = Normal(0.40, 0.05)
    undulation_wavelength: Normal = Normal(250.0, 10.0)  # m
    channel_thickness: float = 0.2          # m; map-view width = ratio * thickness
    undulation_amplitude: float = 0.2       # relative width modulation
    channel_logk: float = math.log10(CHANNEL_MD)
    background_logk: float = math.log10(BACKGROUND_MD)

    @classmethod
    def from_dict(cls, d: dict) -> ChannelPrior:
        kw = {}
        names = {f.name for f in fields(cls)}
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown channel prior key {k!r}")
            kw[k] = Normal(**v) if isinstance(v, dict) else v
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic(self) -> ChannelPrior:
        """Same prior with every standard deviation set to zero."""
        kw = {f.name: Normal(getattr(self, f.name).mean, 0.0)
              for f in fields(self) if isinstance(getattr(self, f.name), Normal)}
        return replace(self, **kw)


@dataclass(frozen=True)
class ChannelParams:
    orientation: float
    amplitude: float
    wavelength: float
    width_thickness_ratio: float
    channel_proportion: float
    undulation_wavelength: float
    channel_thickness: float = 0.2
    undulation_amplitude: float = 0.2
    channel_logk: float = math.log10(CHANNEL_MD)
    background_logk: float = math.log10(BACKGROUND_MD)

    def __post_init__(self):
        if not (self.wavelength > 0 and self.amplitude >= 0 and self.undulation_wavelength > 0):
            raise ValueError("wavelengths must be positive and amplitude non-negative")
        if not self.channel_logk > self.background_logk:
            raise ValueError("channel_logk must exceed background_logk")
        if not 0.05 <= self.channel_proportion <= 0.95:
            raise ValueError("channel_proportion must lie in [0.05, 0.95]")

    @property
    def width(self) -> float:
        return self.width_thickness_ratio * self.channel_thickness


def sample_params(rng: RngStream, prior: ChannelPrior = ChannelPrior()) -> ChannelParams:
    """Draw one parameter set, clamping each value into its valid range."""
    orientation = prior.orientation.draw(rng)
    amplitude = max(prior.amplitude.draw(rng), 0.0)
    wavelength = max(prior.wavelength.draw(rng), 1e-6)
    wt = max(prior.width_thickness_ratio.draw(rng), 1e-6)
    prop = min(max(prior.channel_proportion.draw(rng), 0.05), 0.95)
    und = max(prior.undulation_wavelength.draw(rng), 1e-6)
    return ChannelParams(orientation, amplitude, wavelength, wt, prop, und,
                         prior.channel_thickness, prior.undulation_amplitude,
                         prior.channel_logk, prior.background_logk)


def _channel_mask(params: ChannelParams, x: np.ndarray, y: np.ndarray, half_extent: float,
                  rng: RngStream) -> np.ndarray:
    theta = math.radians(params.orientation)
    c, s = math.cos(theta), math.sin(theta)
    u = x * c + y * s
    v = -x * s + y * c
    phase = rng.uniform(0.0, 2.0 * math.pi)
    und_phase = rng.uniform(0.0, 2.0 * math.pi)
    # centreline crosses u = 0 uniformly across the rotated domain
    v_at_origin = rng.uniform(-half_extent, half_extent)
    v0 = v_at_origin - params.amplitude * math.sin(phase)
    centre = v0 + params.amplitude * np.sin(2.0 * math.pi * u / params.wavelength + phase)
    half_w = 0.5 * params.width * (
        1.0 + params.undulation_amplitude * np.sin(2.0 * math.pi * u / params.undulation_wavelength + und_phase))
    return np.abs(v - centre) <= half_w


def generate_field(params: ChannelParams, grid: GridSpec, rng: RngStream, max_channels: int = 10000) -> LogPermField:
    xc, yc = grid.cell_centers()
    x = xc - 0.5 * grid.nx * grid.dx
    y = yc - 0.5 * grid.ny * grid.dy
    theta = math.radians(params.orientation)
    half_extent = 0.5 * (abs(grid.nx * grid.dx * math.sin(theta)) + abs(grid.ny * grid.dy * math.cos(theta)))
    half_extent += 0.5 * params.width

    facies = np.zeros(grid.shape, dtype=bool)
    target = params.channel_proportion
    for _ in range(max_channels):
        facies |= _channel_mask(params, x, y, half_extent, rng)
        if facies.mean() >= target:
            break
    else:
        raise RuntimeError("channel proportion not reached")  # pragma: no cover
    values = np.where(facies, params.channel_logk, params.background_logk)
    return LogPermField(grid, values)


def generate_training_set(n: int, grid: GridSpec, rng: RngStream, prior: ChannelPrior = ChannelPrior(),
                          tag: str = "prior") -> Ensemble:
    """``n`` independent realizations, each with its own parameter draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    vals = np.empty((n,) + grid.shape)
    for k in range(n):
        member_rng = rng.fork(k)
        p = sample_params(member_rng, prior)
        vals[k] = generate_field(p, grid, member_rng).values
    return Ensemble(grid, vals, seed=rng.seed, tag=tag)


def channel_fraction(values: np.ndarray, threshold: float | None = None) -> float | np.ndarray:
    """Fraction of cells above the facies midpoint (last two axes are the map)."""
    if threshold is None:
        threshold = 0.5 * (math.log10(CHANNEL_MD) + math.log10(BACKGROUND_MD))
    return (np.asarray(values) > threshold).mean(axis=(-2, -1))
