"""Taper matrices for localized ensemble updates.

Three constructions share one N_z x N_d layout (column k = report k // n_wells,
well k % n_wells):

* distance based, Gaspari-Cohn of the cell-to-well distance;
* pseudo-optimal, plug-in taper from the working-ensemble covariances;
* ML-enhanced, the same taper formula with covariances from a large
  super-ensemble pushed through a proxy z -> d.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .fieldcore import Ensemble, GridSpec, RngStream, save_ensemble, stack_maps
from .flowsim import WellSpec


@dataclass(frozen=True)
class LocalizationMatrix:
    entries: np.ndarray
    method: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ValueError("taper must be an N_z x N_d matrix")
        if not np.all(np.isfinite(e)):
            raise ValueError("taper entries must be finite")
        if e.size and (e.min() < 0.0 or e.max() > 1.0):
            raise ValueError("taper entries must lie in [0, 1]")
        object.__setattr__(self, "entries", e)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class CovariancePair:
    c_zd: np.ndarray
    var_z: np.ndarray
    var_d: np.ndarray
    n: int = 0

    def __post_init__(self):
        if np.any(self.var_z < 0) or np.any(self.var_d < 0):
            raise ValueError("variances must be non-negative")


# ---------------------------------------------------------------------------
# distance based

def gaspari_cohn(r, c: float):
    """Fifth-order piecewise rational taper with support [0, 2c]."""
    if not c > 0:
        raise ValueError("half-support c must be positive")
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    z = r / c
    out = np.zeros_like(z)
    a = z <= 1.0
    b = (z > 1.0) & (z < 2.0)
    za = z[a]
    out[a] = (((-0.25 * za + 0.5) * za + 0.625) * za - 5.0 / 3.0) * za * za + 1.0
    zb = z[b]
    out[b] = ((((zb / 12.0 - 0.5) * zb + 0.625) * zb + 5.0 / 3.0) * zb - 5.0) * zb + 4.0 - 2.0 / (3.0 * zb)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def datum_wells(n_wells: int, n_times: int) -> np.ndarray:
    """Well index of each datum in time-major, well-minor order."""
    return np.tile(np.arange(n_wells), n_times)


def gc_matrix(grid: GridSpec, wells: list[WellSpec], c: float, n_times: int = 24) -> LocalizationMatrix:
    monitors = [w for w in wells if w.kind == "monitor"]
    xc, yc = grid.cell_centers()
    cols = []
    for w in monitors:
        wx, wy = (w.i + 0.5) * grid.dx, (w.j + 0.5) * grid.dy
        cols.append(gaspari_cohn(np.hypot(xc - wx, yc - wy).ravel(), c))
    per_well = np.stack(cols, axis=1)
    L = per_well[:, datum_wells(len(monitors), n_times)]
    return LocalizationMatrix(L, "gaspari-cohn", {"c": float(c)})


# ---------------------------------------------------------------------------
# covariances

class _Accumulator:
    """Single-pass mean/covariance of (z, d) merged chunk by chunk (Chan et al.)."""

    def __init__(self, nz: int, nd: int):
        self.n = 0
        self.mz = np.zeros(nz)
        self.md = np.zeros(nd)
        self.sz = np.zeros(nz)
        self.sd = np.zeros(nd)
        self.czd = np.zeros((nz, nd))

    def add(self, Z: np.ndarray, D: np.ndarray) -> None:
        nb = Z.shape[0]
        if nb == 0:
            return
        mz_b = Z.mean(axis=0)
        md_b = D.mean(axis=0)
        Zc = Z - mz_b
        Dc = D - md_b
        sz_b = np.einsum("ij,ij->j", Zc, Zc)
        sd_b = np.einsum("ij,ij->j", Dc, Dc)
        czd_b = Zc.T @ Dc
        if self.n == 0:
            self.n, self.mz, self.md, self.sz, self.sd, self.czd = nb, mz_b, md_b, sz_b, sd_b, czd_b
            return
        n = self.n + nb
        dz = mz_b - self.mz
        dd = md_b - self.md
        w = self.n * nb / n
        self.sz = self.sz + sz_b + w * dz * dz
        self.sd = self.sd + sd_b + w * dd * dd
        self.czd = self.czd + czd_b + w * np.outer(dz, dd)
        self.mz = self.mz + dz * (nb / n)
        self.md = self.md + dd * (nb / n)
        self.n = n

    def result(self) -> CovariancePair:
        if self.n < 2:
            raise ValueError("covariance needs at least 2 members")
        f = 1.0 / (self.n - 1)
        return CovariancePair(self.czd * f, self.sz * f, self.sd * f, self.n)


def _as_rows(x) -> np.ndarray:
    if isinstance(x, Ensemble):
        return x.matrix()
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def covariance_pair(Z, D, chunk: int = 512) -> CovariancePair:
    """Streaming cross-covariance of matched rows of Z and D with 1/(n-1)."""
    Z = _as_rows(Z)
    D = np.asarray(D, dtype=np.float64)
    if Z.shape[0] != D.shape[0]:
        raise ValueError("Z and D must have the same number of rows")
    acc = _Accumulator(Z.shape[1], D.shape[1])
    for lo in range(0, Z.shape[0], chunk):
        acc.add(Z[lo:lo + chunk], D[lo:lo + chunk])
    return acc.result()


def _proxy_fn(proxy) -> Callable[[np.ndarray], np.ndarray]:
    if callable(proxy) and not hasattr(proxy, "kind"):
        return proxy
    from .proxy import predict_batch

    return lambda Z: predict_batch(proxy, Z)


def ml_enhanced_covariance(super_ens, proxy, chunk: int = 512) -> CovariancePair:
    """Covariance of (z, f(z)) over a super-ensemble, one pass in chunks.

    ``super_ens`` is an Ensemble, an (N_s, ...) array or an iterable of row
    chunks; ``proxy`` is a ProxyModel or any callable mapping rows to data.
    """
    f = _proxy_fn(proxy)
    acc = None
    if isinstance(super_ens, (Ensemble, np.ndarray)):
        Z = _as_rows(super_ens)
        chunks: Iterable = (Z[lo:lo + chunk] for lo in range(0, Z.shape[0], chunk))
    else:
        chunks = (_as_rows(c) for c in super_ens)
    for Zc in chunks:
        Dc = np.asarray(f(Zc), dtype=np.float64)
        if acc is None:
            acc = _Accumulator(Zc.shape[1], Dc.shape[1])
        acc.add(Zc, Dc)
    if acc is None:
        raise ValueError("empty super-ensemble")
    return acc.result()


# ---------------------------------------------------------------------------
# tapers

def pseudo_optimal_taper(cov: CovariancePair, n_e: int, eta: float = 1e-3, method: str = "pseudo-optimal",
                         provenance: dict | None = None) -> LocalizationMatrix:
    """L = c^2 / (c^2 + (c^2 + c_ii c_jj) / N_e), zeroed where |c| < eta sqrt(c_ii c_jj)."""
    if n_e < 2:
        raise ValueError("N_e must be >= 2")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    c = np.asarray(cov.c_zd, dtype=np.float64)
    vv = np.outer(cov.var_z, cov.var_d)
    c2 = c * c
    den = c2 + (c2 + vv) / n_e
    L = np.zeros_like(c)
    np.divide(c2, den, out=L, where=den > 0)
    L[np.abs(c) < eta * np.sqrt(vv)] = 0.0
    L[vv <= 0] = 0.0
    prov = {"N_e": int(n_e), "eta": float(eta), "N_cov": int(cov.n)}
    prov.update(provenance or {})
    return LocalizationMatrix(np.clip(L, 0.0, 1.0), method, prov)


def pseudo_optimal_from_ensemble(Z, D, eta: float = 1e-3) -> LocalizationMatrix:
    Z = _as_rows(Z)
    return pseudo_optimal_taper(covariance_pair(Z, D), Z.shape[0], eta)


def ml_localization(working, data, proxy_kind: str, super_ensemble=None, sampler=None, n_s: int | None = None,
                    eta: float = 1e-3, rng: RngStream | None = None, proxy_params: dict | None = None):
    """Fit a proxy on (working, data), push a super-ensemble through it and build the taper.

    Either pass ``super_ensemble`` directly or a ``sampler(n, rng)`` returning
    ``n`` fields.  Returns ``(LocalizationMatrix, ProxyModel)``.
    """
    from .proxy import canonical_kind, fit, validation_report

    rng = RngStream(0) if rng is None else rng
    Z = _as_rows(working)
    n_e = Z.shape[0]
    model = fit(proxy_kind, Z, data, rng.fork("proxy"), params=proxy_params)
    if super_ensemble is None:
        if sampler is None or n_s is None:
            raise ValueError("need a super-ensemble or a sampler with N_s")
        if n_s < n_e:
            raise ValueError("N_s must be >= N_e")
        super_ensemble = sampler(n_s, rng.fork("super-ensemble"))
    S = _as_rows(super_ensemble)
    if S.shape[0] < n_e:
        raise ValueError("N_s must be >= N_e")
    cov = ml_enhanced_covariance(S, model)
    rep = validation_report(model)
    prov = {"N_s": int(S.shape[0]), "proxy": canonical_kind(proxy_kind),
            "proxy_val_rmse": rep["rmse_total"], "proxy_fit_seconds": rep["fit_seconds"]}
    L = pseudo_optimal_taper(cov, n_e, eta, method=f"ml-{proxy_kind}", provenance=prov)
    return L, model


# ---------------------------------------------------------------------------
# persistence

def save_taper_stack(path, L: LocalizationMatrix, grid: GridSpec) -> None:
    """One map per datum in the ensemble binary format."""
    maps = [L.entries[:, k].reshape(grid.shape) for k in range(L.shape[1])]
    save_ensemble(path, stack_maps(grid, maps, tag=L.method))


def write_taper_summary(path, L: LocalizationMatrix, n_wells: int = 4) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["datum", "report", "well", "max", "mean", "nonzero_fraction"])
        for k in range(L.shape[1]):
            col = L.entries[:, k]
            w.writerow([k, k // n_wells, k % n_wells, repr(float(col.max())), repr(float(col.mean())),
                        repr(float(np.mean(col > 0)))])
