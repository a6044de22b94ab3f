"""Ensemble smoother with multiple data assimilation.

Update for member j at step i with inflation alpha:

    z_j <- z_j + K (d_obs + sqrt(alpha) e_j - d_j),   e_j ~ N(0, C_D)
    K    = L o [C_zD (C_DD + alpha C_D)^-1]

with sample covariances from the forecast ensemble and hard clipping to the
parameter bounds afterwards.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .fieldcore import Ensemble, RngStream, ensemble_mean_and_deviations
from .flowsim import ObservationSet
from .localization import LocalizationMatrix

METHODS = ("none", "gaspari-cohn", "pseudo-optimal", "ml-linear", "ml-rf", "ml-gbt")
METHOD_ALIASES = {"gc": "gaspari-cohn", "po": "pseudo-optimal"}


class SingularUpdateError(np.linalg.LinAlgError):
    pass


def canonical_method(name: str) -> str:
    name = METHOD_ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown localization method {name!r}")
    return name


@dataclass(frozen=True)
class EsmdaConfig:
    n_assimilations: int = 4
    alphas: tuple = (4.0, 4.0, 4.0, 4.0)
    bounds: tuple | None = (1.0, 4.0)
    localization: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "localization", canonical_method(self.localization))
        if len(self.alphas) != self.n_assimilations:
            raise ValueError("need one inflation factor per assimilation")
        check_alphas(self.alphas)
        if self.bounds is not None:
            lo, hi = self.bounds
            if not lo < hi:
                raise ValueError("bounds must satisfy lower < upper")
            object.__setattr__(self, "bounds", (float(lo), float(hi)))


def check_alphas(alphas) -> None:
    if any(a < 1.0 for a in alphas):
        raise ValueError("every inflation factor must be >= 1")
    s = math.fsum(1.0 / a for a in alphas)
    if abs(s - 1.0) > 1e-12:
        raise ValueError(f"sum of 1/alpha is {s!r}, expected 1")


@dataclass
class AssimilationRecord:
    iteration: int
    prior_tag: str
    posterior_tag: str
    rmse: float
    nv: float
    method: str
    n_e: int
    n_s: int = 0
    taper: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# metrics

def normalized_variance(prior, post) -> float:
    """tr(C_post) / tr(C_prior) from per-cell sample variances."""
    p = _rows(prior)
    q = _rows(post)
    if p.shape[1] != q.shape[1]:
        raise ValueError("prior and posterior grids differ")
    if p.shape[0] < 2 or q.shape[0] < 2:
        raise ValueError("insufficient ensemble")
    vp = math.fsum(p.var(axis=0, ddof=1))
    if vp == 0.0:
        raise ZeroDivisionError("prior ensemble has zero variance")
    return math.fsum(q.var(axis=0, ddof=1)) / vp


def data_rmse(D, obs) -> float:
    d_obs = obs.d_obs if isinstance(obs, ObservationSet) else np.asarray(obs, dtype=np.float64)
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    if D.shape[1] != d_obs.size:
        raise ValueError("data and observation lengths differ")
    r = D - d_obs
    return float(np.sqrt(np.mean(r * r)))


# ---------------------------------------------------------------------------
# update

def _rows(x) -> np.ndarray:
    if isinstance(x, Ensemble):
        return x.matrix()
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1) if x.ndim > 2 else np.atleast_2d(x)


def perturbations(rng: RngStream, n_e: int, sigma: np.ndarray) -> np.ndarray:
    """Observation perturbations e_j ~ N(0, diag(sigma^2)), one forked stream per member."""
    return np.stack([sigma * rng.fork(f"member-{j}").standard_normal(sigma.size) for j in range(n_e)])


def kalman_gain(Z: np.ndarray, D: np.ndarray, cd: np.ndarray, alpha: float) -> np.ndarray:
    """C_zD (C_DD + alpha C_D)^-1 from forecast anomalies (N_z x N_d)."""
    n_e = Z.shape[0]
    _, dz = ensemble_mean_and_deviations(Z)
    _, dd = ensemble_mean_and_deviations(D)
    czd = dz.T @ dd / (n_e - 1)
    cdd = dd.T @ dd / (n_e - 1)
    C = cdd + alpha * np.diag(cd)
    try:
        cf = scipy.linalg.cho_factor(C, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(C) if np.all(np.isfinite(C)) else float("inf")
        raise SingularUpdateError(
            f"C_DD + alpha C_D is not positive definite (condition number {cond:.3e})") from exc
    return scipy.linalg.cho_solve(cf, czd.T).T


def _analysis(Z, D, d_obs, cd, alpha, E, L):
    K = kalman_gain(Z, D, cd, alpha)
    if L is not None:
        K = np.asarray(L.entries if isinstance(L, LocalizationMatrix) else L) * K
    innov = d_obs + math.sqrt(alpha) * E - D
    return Z + innov @ K.T


def enkf_analysis(Z, D, d_obs, cd, E, L=None) -> np.ndarray:
    """Perturbed-observation ensemble Kalman analysis (no inflation, no clipping)."""
    return _analysis(_rows(Z), _rows(D), np.asarray(d_obs, dtype=np.float64), np.asarray(cd), 1.0, E, L)


def esmda_update(prior, D_f, obs: ObservationSet, alpha: float, L: LocalizationMatrix | np.ndarray | None = None,
                 rng: RngStream | None = None, bounds: tuple | None = (1.0, 4.0),
                 E: np.ndarray | None = None):
    """One ESMDA analysis step.  Returns an Ensemble if given one, else a matrix."""
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    Z = _rows(prior)
    D = _rows(D_f)
    if Z.shape[0] != D.shape[0] or D.shape[1] != obs.d_obs.size:
        raise ValueError("inconsistent ensemble, data and observation shapes")
    if L is not None:
        shape = (L.entries if isinstance(L, LocalizationMatrix) else np.asarray(L)).shape
        if shape != (Z.shape[1], D.shape[1]):
            raise ValueError(f"taper shape {shape} does not match ({Z.shape[1]}, {D.shape[1]})")
    if E is None:
        rng = RngStream(0) if rng is None else rng
        E = perturbations(rng, Z.shape[0], obs.sigma)
    Za = _analysis(Z, D, obs.d_obs, obs.cd_diag, alpha, E, L)
    if bounds is not None:
        Za = np.clip(Za, bounds[0], bounds[1])
    if isinstance(prior, Ensemble):
        return prior.with_values(Za.reshape(prior.values.shape), tag=prior.tag)
    return Za


# ---------------------------------------------------------------------------
# driver

Forward = Callable[[np.ndarray], np.ndarray]
LocBuilder = Callable[[np.ndarray, np.ndarray, int, RngStream], "LocalizationMatrix | None"]


def run_esmda(cfg: EsmdaConfig, prior: Ensemble, forward: Forward, obs: ObservationSet,
              loc_builder: LocBuilder | None = None, rng: RngStream | None = None,
              n_s: int = 0, on_iteration=None):
    """Run all assimilation steps.

    Returns the posterior ensemble and ``n_assimilations + 1`` records: record
    0 describes the prior, record i the ensemble after update i.  RMSE is the
    data mismatch of the simulated ensemble; NV is relative to the prior.
    """
    check_alphas(cfg.alphas)
    rng = RngStream(0) if rng is None else rng
    Z0 = prior.matrix()
    Z = Z0
    n_e = Z.shape[0]
    records: list[AssimilationRecord] = []
    tag = prev_tag = prior.tag
    taper_info: dict = {}
    t_update = 0.0
    t_loc = 0.0
    for it in range(cfg.n_assimilations + 1):
        t0 = time.perf_counter()
        D = np.asarray(forward(Z), dtype=np.float64)
        t_sim = time.perf_counter() - t0
        nv = normalized_variance(Z0, Z)
        records.append(AssimilationRecord(it, prev_tag, tag,
                                          data_rmse(D, obs), nv, cfg.localization, n_e, n_s, dict(taper_info),
                                          {"simulate": t_sim, "localize": t_loc, "update": t_update}))
        if on_iteration is not None:
            on_iteration(records[-1], Z, D)
        if it == cfg.n_assimilations:
            break
        irng = rng.fork(f"iteration-{it}")
        t0 = time.perf_counter()
        L = None
        if loc_builder is not None and cfg.localization != "none":
            L = loc_builder(Z, D, it, irng.fork("localization"))
            taper_info = dict(L.provenance) if L is not None else {}
            if L is not None:
                taper_info.update(mean_entry=float(L.entries.mean()))
        t_loc = time.perf_counter() - t0
        t0 = time.perf_counter()
        Z = esmda_update(Z, D, obs, cfg.alphas[it], L, irng.fork("perturbations"), cfg.bounds)
        t_update = time.perf_counter() - t0
        prev_tag, tag = tag, f"posterior-iter-{it}"
        if cfg.bounds is not None and (Z.min() < cfg.bounds[0] or Z.max() > cfg.bounds[1]):
            raise AssertionError("posterior left the parameter bounds")  # pragma: no cover
    post = prior.with_values(Z.reshape(prior.values.shape), tag=tag)
    return post, records


def make_loc_builder(method: str, grid, wells, *, eta: float = 1e-3, gc_half_support: float = 50.0,
                     n_times: int = 24, super_source=None, n_s: int = 0, regenerate: bool = False,
                     proxy_params: dict | None = None, rng: RngStream | None = None) -> LocBuilder | None:
    """Localization callback for :func:`run_esmda`.

    ``super_source(n, rng)`` supplies super-ensemble fields for the ml-* methods;
    by default it is called once and the result reused for every iteration.
    """
    from . import localization as loc

    method = canonical_method(method)
    if method == "none":
        return None
    if method == "gaspari-cohn":
        L_gc = loc.gc_matrix(grid, wells, gc_half_support, n_times)
        return _recording(lambda Z, D, it, rng: L_gc)
    if method == "pseudo-optimal":
        return _recording(lambda Z, D, it, rng: loc.pseudo_optimal_from_ensemble(Z, D, eta))
    if super_source is None or n_s < 2:
        raise ValueError(f"{method} needs a super-ensemble source and N_s")
    kind = method[3:]
    cache: dict = {}
    base_rng = RngStream(0) if rng is None else rng

    def build(Z, D, it, rng):
        if regenerate or "S" not in cache:
            srng = rng.fork("super-ensemble") if regenerate else base_rng.fork("super-ensemble")
            cache["S"] = _rows(super_source(n_s, srng))
        L, model = loc.ml_localization(Z, D, kind, super_ensemble=cache["S"], eta=eta, rng=rng,
                                       proxy_params=proxy_params)
        cache["last_proxy"] = model
        return L

    wrapped = _recording(build)
    wrapped.cache = cache
    return wrapped


def _recording(build):
    """Wrap a builder so the most recent taper stays available as ``.last_taper``."""
    def wrapped(Z, D, it, rng):
        wrapped.last_taper = build(Z, D, it, rng)
        return wrapped.last_taper

    wrapped.last_taper = None
    return wrapped
