"""Experiment configuration: a JSON document validated against a strict schema."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..channelgen import ChannelPrior, Normal
from ..esmda import EsmdaConfig, canonical_method, check_alphas
from ..fieldcore import GridSpec
from ..flowsim import SimConfig
from ..scorediff import NetworkSpec, TrainConfig, VESchedule


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NormalCfg(_Strict):
    mean: float
    std: float = Field(ge=0.0)


class GridCfg(_Strict):
    nx: int = Field(64, ge=2)
    ny: int = Field(64, ge=2)
    dx: float = Field(5.0, gt=0)
    dy: float = Field(5.0, gt=0)
    thickness: float = Field(10.0, gt=0)


class ChannelCfg(_Strict):
    orientation: NormalCfg = NormalCfg(mean=90.0, std=30.0)
    amplitude: NormalCfg = NormalCfg(mean=250.0, std=10.0)
    wavelength: NormalCfg = NormalCfg(mean=2000.0, std=50.0)
    width_thickness_ratio: NormalCfg = NormalCfg(mean=50.0, std=5.0)
    channel_proportion: NormalCfg = NormalCfg(mean=0.40, std=0.05)
    undulation_wavelength: NormalCfg = NormalCfg(mean=250.0, std=10.0)
    channel_thickness: float = Field(0.2, gt=0)
    undulation_amplitude: float = Field(0.2, ge=0, lt=1)
    channel_logk: float = 3.3010299956639813
    background_logk: float = 1.6989700043360187


class SimCfg(_Strict):
    porosity: float = Field(0.3, gt=0, le=1)
    total_compressibility: float = Field(1e-4, gt=0)
    viscosity: float = Field(SimConfig().viscosity, gt=0)
    initial_pressure: float = Field(150.0, gt=0)
    duration: float = Field(730.0, gt=0)
    n_reports: int = Field(24, ge=1)
    injection_rate: float = Field(1000.0, ge=0)
    substeps: int = Field(4, ge=1)
    well_radius_factor: float = Field(0.2, gt=0)
    wellbore_radius: float = Field(0.1, gt=0)
    solver: Literal["cg", "direct"] = "direct"
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(20000, ge=1)
    monitor_offset: Optional[int] = Field(None, ge=1)


class EsmdaCfg(_Strict):
    n_assimilations: int = Field(4, ge=1)
    alphas: list[float] = [4.0, 4.0, 4.0, 4.0]
    bounds: tuple[float, float] = (1.0, 4.0)

    @model_validator(mode="after")
    def _alphas(self):
        if len(self.alphas) != self.n_assimilations:
            raise ValueError("alphas must have n_assimilations entries")
        check_alphas(self.alphas)
        return self


class ProxyParamsCfg(_Strict):
    linear: dict = {}
    rf: dict = {}
    gbt: dict = {}


class LocalizationCfg(_Strict):
    eta: float = Field(1e-3, ge=0)
    gc_half_support: float = Field(50.0, gt=0)
    n_super: int = Field(5000, ge=2)
    regenerate_super: bool = False
    super_source: Literal["diffusion", "channelgen", "file"] = "diffusion"
    super_file: Optional[str] = None
    proxy_params: ProxyParamsCfg = ProxyParamsCfg()


class NetworkCfg(_Strict):
    channels: int = Field(16, ge=1)
    n_blocks: int = Field(4, ge=1)
    kernel: int = Field(3, ge=1)
    embed_dim: int = Field(32, ge=2)
    fourier_scale: float = Field(16.0, gt=0)


class TrainCfg(_Strict):
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=1)
    optimizer: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(1e-4, gt=0)
    lr_min: float = Field(1e-6, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    grad_clip: Optional[float] = 1.0
    patience: Optional[int] = None
    min_delta: float = 0.0


class DiffusionCfg(_Strict):
    sigma: float = Field(25.0, gt=1)
    eps: float = Field(1e-3, gt=0, lt=1)
    network: NetworkCfg = NetworkCfg()
    train: TrainCfg = TrainCfg()
    n_train: int = Field(3242, ge=1)
    weights: Optional[str] = None
    sampler: Literal["ode", "pc"] = "ode"
    n_steps: int = Field(1000, ge=2)
    snr: float = Field(0.16, ge=0)
    batch: int = Field(250, ge=1)


class ExperimentConfig(_Strict):
    seed: int = Field(20240, ge=0)
    grid: GridCfg = GridCfg()
    channel: ChannelCfg = ChannelCfg()
    sim: SimCfg = SimCfg()
    esmda: EsmdaCfg = EsmdaCfg()
    localization: LocalizationCfg = LocalizationCfg()
    diffusion: DiffusionCfg = DiffusionCfg()
    ensemble_sizes: list[int] = [50, 100, 200, 500, 1000]
    methods: list[str] = ["none", "gaspari-cohn", "pseudo-optimal", "ml-linear", "ml-rf", "ml-gbt"]
    noise_frac: float = Field(0.01, ge=0)
    n_prior: int = Field(50, ge=1)

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        out = [canonical_method(m) for m in v]
        if len(set(out)) != len(out):
            raise ValueError("duplicate methods")
        return out

    @field_validator("ensemble_sizes")
    @classmethod
    def _sizes(cls, v):
        if not v or any(n < 2 for n in v):
            raise ValueError("ensemble sizes must be >= 2")
        return v

    # -- conversions ------------------------------------------------------
    def grid_spec(self) -> GridSpec:
        return GridSpec(**self.grid.model_dump())

    def channel_prior(self) -> ChannelPrior:
        d = self.channel.model_dump()
        return ChannelPrior(**{k: Normal(**v) if isinstance(v, dict) else v for k, v in d.items()})

    def sim_config(self) -> SimConfig:
        d = self.sim.model_dump()
        d.pop("monitor_offset")
        return SimConfig(**d)

    def esmda_config(self, method: str) -> EsmdaConfig:
        return EsmdaConfig(self.esmda.n_assimilations, tuple(self.esmda.alphas), tuple(self.esmda.bounds), method)

    def schedule(self) -> VESchedule:
        return VESchedule(self.diffusion.sigma, 1.0, self.diffusion.eps)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(**self.diffusion.network.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.diffusion.train.model_dump())

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def load_config(path=None, overrides: dict | None = None, base_dir=None) -> ExperimentConfig:
    """Read and validate a JSON config; referenced files are resolved against its directory."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
        base_dir = p.parent if base_dir is None else base_dir
    data.update(overrides or {})
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"schema error: {_format_error(exc)}") from None
    except ValueError as exc:
        raise ConfigError(f"schema error: {exc}") from None
    return _check_files(cfg, Path(base_dir) if base_dir is not None else Path.cwd())


def _resolve(base: Path, s: str) -> str:
    p = Path(s)
    return str(p if p.is_absolute() else (base / p).resolve())


def _check_files(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    upd_loc, upd_diff = {}, {}
    if cfg.localization.super_file is not None:
        upd_loc["super_file"] = _resolve(base, cfg.localization.super_file)
        if not Path(upd_loc["super_file"]).is_file():
            raise ConfigError(f"localization.super_file not found: {upd_loc['super_file']}")
    if cfg.localization.super_source == "file" and cfg.localization.super_file is None:
        raise ConfigError("localization.super_source 'file' needs localization.super_file")
    if cfg.diffusion.weights is not None:
        upd_diff["weights"] = _resolve(base, cfg.diffusion.weights)
        if not Path(upd_diff["weights"]).is_file():
            raise ConfigError(f"diffusion.weights not found: {upd_diff['weights']}")
    if upd_loc or upd_diff:
        cfg = cfg.model_copy(update={
            "localization": cfg.localization.model_copy(update=upd_loc),
            "diffusion": cfg.diffusion.model_copy(update=upd_diff)})
    return cfg
