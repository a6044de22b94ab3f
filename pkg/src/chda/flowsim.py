"""Single-phase, slightly compressible Darcy flow on a 2D Cartesian grid.

Cell-centred finite volumes with two-point harmonic transmissibilities,
backward-Euler time stepping and no-flow outer boundaries.  One
rate-controlled injector sits at the grid centre; four monitors sit in a
five-spot pattern around it.  Units: m, mD, cP, bar, day.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fieldcore import GridSpec, LogPermField, RngStream

# q [m3/day] = DARCY * k [mD] * A [m2] * dp [bar] / (mu [cP] * L [m])
DARCY = 9.869233e-16 * 1e5 / 1e-3 * 86400.0

WELL_NAMES = ("N", "E", "S", "W")


class SolverError(RuntimeError):
    """Linear solve failed to converge."""

    def __init__(self, message, iterations=None, residual=None, step=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.step = step


@dataclass(frozen=True)
class WellSpec:
    i: int
    j: int
    kind: str  # "injector" | "monitor"
    name: str = ""
    rate: float = 0.0  # m3/day, injector only


@dataclass(frozen=True)
class SimConfig:
    porosity: float = 0.3
    total_compressibility: float = 1e-4   # 1/bar
    viscosity: float = 3000.0             # cP
    initial_pressure: float = 150.0       # bar
    duration: float = 730.0               # days
    n_reports: int = 24
    injection_rate: float = 1000.0        # m3/year
    substeps: int = 4                     # backward-Euler steps per report interval
    well_radius_factor: float = 0.2       # Peaceman r_eq = factor * dx
    wellbore_radius: float = 0.1          # m
    solver: str = "cg"                    # "cg" | "direct"
    tol: float = 1e-10
    max_iter: int = 20000

    def __post_init__(self):
        for name in ("porosity", "total_compressibility", "viscosity", "initial_pressure",
                     "duration", "n_reports", "substeps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")
        if self.injection_rate < 0:
            raise ValueError("injection_rate must be non-negative")
        if self.solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def report_interval(self) -> float:
        return self.duration / self.n_reports

    @property
    def rate_m3_per_day(self) -> float:
        return self.injection_rate / 365.0

    def report_days(self) -> np.ndarray:
        return self.report_interval * np.arange(1, self.n_reports + 1)


def five_spot(grid: GridSpec, rate: float, offset: int | None = None) -> list[WellSpec]:
    """Injector at the centre cell and N/E/S/W monitors ``offset`` cells away.

    The default offset is a quarter of the smaller grid dimension (16 cells on
    64x64).  North is increasing j.
    """
    ci, cj = grid.nx // 2, grid.ny // 2
    if offset is None:
        offset = min(grid.nx, grid.ny) // 4
    wells = [WellSpec(ci, cj, "injector", "INJ", rate)]
    for name, (di, dj) in zip(WELL_NAMES, ((0, 1), (1, 0), (0, -1), (-1, 0))):
        wells.append(WellSpec(ci + di * offset, cj + dj * offset, "monitor", name))
    validate_wells(grid, wells)
    return wells


def validate_wells(grid: GridSpec, wells: list[WellSpec]) -> None:
    inj = [w for w in wells if w.kind == "injector"]
    mon = [w for w in wells if w.kind == "monitor"]
    if len(inj) != 1 or len(mon) != 4 or len(wells) != 5:
        raise ValueError("need exactly one injector and four monitors")
    for w in wells:
        if not (0 <= w.i < grid.nx and 0 <= w.j < grid.ny):
            raise ValueError(f"well {w.name or w.kind} at ({w.i},{w.j}) lies outside the grid")
    c = inj[0]
    if (c.i, c.j) != (grid.nx // 2, grid.ny // 2):
        raise ValueError("injector must sit at the grid centre cell")
    d = {abs(w.i - c.i) + abs(w.j - c.j) for w in mon}
    on_axis = all((w.i == c.i) != (w.j == c.j) for w in mon)
    if len(d) != 1 or not on_axis:
        raise ValueError("monitors must be equidistant from the injector in the cardinal directions")


@dataclass(frozen=True)
class PressureSeries:
    times: np.ndarray     # report days, length n_reports
    values: np.ndarray    # (n_reports, 4) bar, columns N, E, S, W
    injector: np.ndarray | None = None      # injector-cell pressure per report
    injector_bhp: np.ndarray | None = None  # Peaceman bottom-hole pressure per report

    @property
    def flat(self) -> np.ndarray:
        """Time-major, well-minor data vector (length 96 for 24 reports)."""
        return self.values.reshape(-1)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SimResult:
    series: PressureSeries
    states: np.ndarray         # (n_reports, ny, nx) full pressure maps
    injected: np.ndarray       # cumulative injected volume per report [m3]
    iterations: int


def transmissibilities(k_md: np.ndarray, grid: GridSpec, viscosity: float) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic-mean face transmissibilities [m3/day/bar] in x and y."""
    kx = 2.0 * k_md[:, :-1] * k_md[:, 1:] / (k_md[:, :-1] + k_md[:, 1:])
    ky = 2.0 * k_md[:-1, :] * k_md[1:, :] / (k_md[:-1, :] + k_md[1:, :])
    tx = DARCY * kx * grid.dy * grid.thickness / (grid.dx * viscosity)
    ty = DARCY * ky * grid.dx * grid.thickness / (grid.dy * viscosity)
    return tx, ty


def _laplacian(tx: np.ndarray, ty: np.ndarray, grid: GridSpec) -> sp.csr_matrix:
    ny, nx = grid.shape
    idx = np.arange(ny * nx).reshape(ny, nx)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    t = np.concatenate([tx.ravel(), ty.ravel()])
    off = sp.coo_matrix((-t, (rows, cols)), shape=(ny * nx, ny * nx))
    off = off + off.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def peaceman_index(k_md: float, grid: GridSpec, cfg: SimConfig) -> float:
    r_eq = cfg.well_radius_factor * grid.dx
    return 2.0 * np.pi * DARCY * k_md * grid.thickness / (cfg.viscosity * np.log(r_eq / cfg.wellbore_radius))


def _pcg(A, b, x0, diag_inv, tol, max_iter):
    """Jacobi-preconditioned CG; returns (x, iterations, relative residual)."""
    x = x0.copy()
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    if np.linalg.norm(r) <= tol * bnorm:
        return x, 0, np.linalg.norm(r) / bnorm
    z = diag_inv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        a = rz / (p @ Ap)
        x += a * p
        r -= a * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, it, rel
        z = diag_inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, rel


def run(z: LogPermField, cfg: SimConfig = SimConfig(), wells: list[WellSpec] | None = None) -> SimResult:
    grid = z.grid
    if not np.all(np.isfinite(z.values)):
        raise ValueError("non-finite log-permeability rejected")
    if wells is None:
        wells = five_spot(grid, cfg.rate_m3_per_day)
    validate_wells(grid, wells)
    inj = next(w for w in wells if w.kind == "injector")
    monitors = [w for w in wells if w.kind == "monitor"]

    k = 10.0 ** z.values
    tx, ty = transmissibilities(k, grid, cfg.viscosity)
    lap = _laplacian(tx, ty, grid)
    dt = cfg.report_interval / cfg.substeps
    acc = cfg.porosity * cfg.total_compressibility * grid.cell_volume / dt
    A = (lap + sp.identity(grid.n_cells, format="csr") * acc).tocsr()

    q = np.zeros(grid.n_cells)
    inj_idx = inj.j * grid.nx + inj.i
    q[inj_idx] = inj.rate

    p = np.full(grid.n_cells, cfg.initial_pressure)
    if cfg.solver == "direct":
        lu = spla.splu(A.tocsc())
    diag_inv = 1.0 / A.diagonal()

    n = cfg.n_reports
    states = np.empty((n,) + grid.shape)
    injected = np.empty(n)
    total_it = 0
    step = 0
    for r in range(n):
        for _ in range(cfg.substeps):
            b = acc * p + q
            if cfg.solver == "direct":
                p = lu.solve(b)
            else:
                p, it, rel = _pcg(A, b, p, diag_inv, cfg.tol, cfg.max_iter)
                total_it += it
                if rel > cfg.tol:
                    raise SolverError(
                        f"CG did not converge at step {step}: {it} iterations, "
                        f"relative residual {rel:.3e} > {cfg.tol:.1e}",
                        iterations=it, residual=rel, step=step)
            step += 1
        if not np.all(np.isfinite(p)):
            raise SolverError(f"non-finite pressure after report {r}", step=step)
        states[r] = p.reshape(grid.shape)
        injected[r] = inj.rate * dt * cfg.substeps * (r + 1)

    mon = np.stack([states[:, w.j, w.i] for w in monitors], axis=1)
    p_inj = states[:, inj.j, inj.i]
    wi = peaceman_index(k[inj.j, inj.i], grid, cfg)
    bhp = p_inj + inj.rate / wi
    series = PressureSeries(cfg.report_days(), mon, injector=p_inj, injector_bhp=bhp)
    return SimResult(series, states, injected, total_it)


def simulate(z: LogPermField, cfg: SimConfig = SimConfig(), wells: list[WellSpec] | None = None) -> PressureSeries:
    """The forward operator G(z): monitor pressures at every report time."""
    return run(z, cfg, wells).series


class ForwardError(RuntimeError):
    def __init__(self, member: int, cause: Exception):
        super().__init__(f"forward simulation failed for member {member}: {cause}")
        self.member = member
        self.cause = cause


def simulate_ensemble(Z, grid: GridSpec, cfg: SimConfig = SimConfig(),
                      wells: list[WellSpec] | None = None) -> np.ndarray:
    """Forward-simulate every row of ``Z`` (flat log10 k); returns (n, n_data)."""
    Z = np.asarray(Z.values if hasattr(Z, "values") else Z, dtype=np.float64).reshape(-1, grid.n_cells)
    out = []
    for m, row in enumerate(Z):
        try:
            out.append(simulate(LogPermField(grid, row.reshape(grid.shape)), cfg, wells).flat)
        except (SolverError, ValueError) as exc:
            raise ForwardError(m, exc) from exc
    return np.stack(out)


def mass_balance_error(z: LogPermField, cfg: SimConfig, result: SimResult) -> np.ndarray:
    """Relative mismatch between injected volume and compressive storage, per report."""
    stored = (cfg.porosity * cfg.total_compressibility * z.grid.cell_volume
              * (result.states - cfg.initial_pressure).reshape(len(result.injected), -1).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(result.injected > 0, np.abs(stored - result.injected) / result.injected,
                        np.abs(stored))


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class ObservationSet:
    times: np.ndarray
    d_obs: np.ndarray     # flat, time-major / well-minor
    sigma: np.ndarray     # flat standard deviations; C_D = diag(sigma**2)

    @property
    def cd_diag(self) -> np.ndarray:
        return self.sigma ** 2

    def __len__(self) -> int:
        return self.d_obs.size


def observe(truth: PressureSeries, noise_frac: float, rng: RngStream) -> ObservationSet:
    if noise_frac < 0:
        raise ValueError("noise_frac must be >= 0")
    d = truth.flat
    sigma = noise_frac * np.abs(d)
    eps = rng.standard_normal(d.shape)
    return ObservationSet(np.asarray(truth.times), d + sigma * eps, sigma)


def write_series_csv(path, s: PressureSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report_day"] + [f"well_{n}" for n in WELL_NAMES])
        for t, row in zip(s.times, s.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_series_csv(path) -> PressureSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["report_day"]) for r in rows])
    vals = np.array([[float(r[f"well_{n}"]) for n in WELL_NAMES] for r in rows])
    return PressureSeries(times, vals)


def write_observations_csv(path, obs: ObservationSet) -> None:
    d = obs.d_obs.reshape(len(obs.times), len(WELL_NAMES))
    s = obs.sigma.reshape(d.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report_day"] + [f"well_{n}" for n in WELL_NAMES] + [f"sigma_{n}" for n in WELL_NAMES])
        for t, dr, sr in zip(obs.times, d, s):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in dr] + [repr(float(v)) for v in sr])


def read_observations_csv(path) -> ObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["report_day"]) for r in rows])
    d = np.array([[float(r[f"well_{n}"]) for n in WELL_NAMES] for r in rows])
    s = np.array([[float(r[f"sigma_{n}"]) for n in WELL_NAMES] for r in rows])
    return ObservationSet(times, d.reshape(-1), s.reshape(-1))
