"""Grid, field and ensemble types, seeded random streams and on-disk formats.

Log10-permeability (millidarcy) is the canonical parameter everywhere in the
package.  Linear permeability only appears inside the flow simulator.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FIELD_MAGIC = b"CHDA"
ENSEMBLE_MAGIC = b"CHEN"
FIELD_VERSION = 1

_FIELD_HEADER = struct.Struct("<4sHIIddd")
_COUNT = struct.Struct("<I")

MASK64 = (1 << 64) - 1


class FieldIOError(ValueError):
    """Base class for malformed field and ensemble files."""


class FormatError(FieldIOError):
    """Wrong magic number or unsupported version."""


class DimensionMismatchError(FieldIOError):
    """Header dimensions are invalid or disagree with the expected grid."""


class TruncatedPayloadError(FieldIOError):
    """The file ends before the declared number of values."""


class InsufficientEnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    nx: int = 64
    ny: int = 64
    dx: float = 5.0
    dy: float = 5.0
    thickness: float = 10.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0 and self.thickness > 0):
            raise ValueError("dx, dy and thickness must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.thickness

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of cell centres in metres, each shaped (ny, nx)."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy,
                "thickness": self.thickness}


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LogPermField:
    """A 2D map of log10(k [mD]); ``values`` is shaped (ny, nx), row j = y index."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.size != self.grid.n_cells:
            raise DimensionMismatchError(
                f"expected {self.grid.n_cells} values for {self.grid.nx}x{self.grid.ny}, got {v.size}")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def permeability_md(self) -> np.ndarray:
        return 10.0 ** self.values


@dataclass(frozen=True)
class Ensemble:
    """Ordered members sharing one grid, stored as a stacked (n, ny, nx) array."""

    grid: GridSpec
    values: np.ndarray
    seed: int = 0
    tag: str = "prior"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim == 2 and v.shape[1] == self.grid.n_cells:
            v = v.reshape((-1,) + self.grid.shape)
        if v.ndim != 3 or v.shape[1:] != self.grid.shape:
            raise DimensionMismatchError(
                f"ensemble array of shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_fields(cls, fields: Sequence[LogPermField], seed: int = 0, tag: str = "prior") -> Ensemble:
        if not fields:
            raise InsufficientEnsembleError("cannot build an ensemble from zero fields")
        grid = fields[0].grid
        for f in fields:
            if f.grid != grid:
                raise DimensionMismatchError("ensemble members must share one GridSpec")
        return cls(grid, np.stack([f.values for f in fields]), seed=seed, tag=tag)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> LogPermField:
        return LogPermField(self.grid, self.values[i])

    @property
    def members(self) -> list[LogPermField]:
        return [self[i] for i in range(len(self))]

    def matrix(self) -> np.ndarray:
        """Members as rows of an (n, N_z) matrix."""
        return self.values.reshape(len(self), -1)

    def with_values(self, values: np.ndarray, tag: str | None = None) -> Ensemble:
        return Ensemble(self.grid, values, seed=self.seed, tag=self.tag if tag is None else tag)

    def subset(self, n: int) -> Ensemble:
        return Ensemble(self.grid, self.values[:n], seed=self.seed, tag=self.tag)


def ensemble_mean_and_deviations(e: Ensemble | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell mean and the deviation matrix (row j = z_j - mean).

    Accepts an Ensemble or a raw (n, N_z) matrix; the mean is accumulated in
    extended precision so the deviations sum to zero to rounding.
    """
    m = e.matrix() if isinstance(e, Ensemble) else np.asarray(e, dtype=np.float64)
    if m.shape[0] < 2:
        raise InsufficientEnsembleError(f"insufficient ensemble: {m.shape[0]} member(s), need >= 2")
    mean_ext = m.astype(np.longdouble).sum(axis=0) / m.shape[0]
    dev = (m.astype(np.longdouble) - mean_ext).astype(np.float64)
    return mean_ext.astype(np.float64), dev


# ---------------------------------------------------------------------------
# random streams

def _mix_label(stream_id: int, label: str) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"chda-rng")
    h.update(int(stream_id & MASK64).to_bytes(8, "little"))
    h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Draws come from PCG64 seeded through ``SeedSequence(entropy=seed,
    spawn_key=(lo32, hi32) of stream_id)``.  Child ids are the first 8 bytes
    (little endian) of ``blake2b(person="chda-rng", parent_id_le64 || label)``,
    so forked streams need no shared state.  Not thread safe: fork one per
    worker.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        ss = np.random.SeedSequence(
            entropy=self.seed,
            spawn_key=(self.stream_id & 0xFFFFFFFF, self.stream_id >> 32))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def fork(self, label) -> RngStream:
        return RngStream(self.seed, _mix_label(self.stream_id, str(label)))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#018x})"


def rng_fork(parent: RngStream, label) -> RngStream:
    return parent.fork(label)


# ---------------------------------------------------------------------------
# binary / csv formats

def _field_record(grid: GridSpec, values: np.ndarray) -> bytes:
    head = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, grid.nx, grid.ny,
                              grid.dx, grid.dy, grid.thickness)
    return head + np.ascontiguousarray(values, dtype="<f8").tobytes()


def _parse_field(buf: bytes, offset: int, expect: GridSpec | None) -> tuple[GridSpec, np.ndarray, int]:
    if len(buf) - offset < _FIELD_HEADER.size:
        if buf[offset:offset + 4] not in (FIELD_MAGIC[:len(buf) - offset], b""):
            raise FormatError("format error: bad magic number")
        raise TruncatedPayloadError("truncated payload: incomplete header")
    magic, version, nx, ny, dx, dy, th = _FIELD_HEADER.unpack_from(buf, offset)
    if magic != FIELD_MAGIC:
        raise FormatError(f"format error: bad magic number {magic!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"format error: unsupported version {version}")
    try:
        grid = GridSpec(nx, ny, dx, dy, th)
    except ValueError as exc:
        raise DimensionMismatchError(f"dimension mismatch: {exc}") from None
    if expect is not None and (grid.nx, grid.ny) != (expect.nx, expect.ny):
        raise DimensionMismatchError(
            f"dimension mismatch: file is {nx}x{ny}, expected {expect.nx}x{expect.ny}")
    start = offset + _FIELD_HEADER.size
    nbytes = 8 * nx * ny
    if len(buf) - start < nbytes:
        got = (len(buf) - start) // 8
        raise TruncatedPayloadError(f"truncated payload: {got} of {nx * ny} values")
    vals = np.frombuffer(buf, dtype="<f8", count=nx * ny, offset=start).astype(np.float64)
    return grid, vals.reshape(ny, nx), start + nbytes


def save_field(path, f: LogPermField) -> None:
    Path(path).write_bytes(_field_record(f.grid, f.values))


def load_field(path, grid: GridSpec | None = None) -> LogPermField:
    buf = Path(path).read_bytes()
    g, vals, end = _parse_field(buf, 0, grid)
    if end != len(buf):
        raise DimensionMismatchError(
            f"dimension mismatch: {len(buf) - end} trailing bytes after {g.nx}x{g.ny} payload")
    return LogPermField(g, vals)


def save_ensemble(path, e: Ensemble) -> None:
    parts = [ENSEMBLE_MAGIC, _COUNT.pack(len(e))]
    parts.extend(_field_record(e.grid, v) for v in e.values)
    Path(path).write_bytes(b"".join(parts))


def load_ensemble(path, grid: GridSpec | None = None, tag: str = "prior", seed: int = 0) -> Ensemble:
    buf = Path(path).read_bytes()
    if buf[:4] != ENSEMBLE_MAGIC:
        raise FormatError(f"format error: bad ensemble magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedPayloadError("truncated payload: missing member count")
    (count,) = _COUNT.unpack_from(buf, 4)
    offset = 8
    values = []
    for _ in range(count):
        if offset >= len(buf):
            raise TruncatedPayloadError(f"truncated payload: {len(values)} of {count} members")
        g, v, offset = _parse_field(buf, offset, grid)
        grid = g if grid is None else grid
        values.append(v)
    if offset != len(buf):
        raise DimensionMismatchError(f"dimension mismatch: {len(buf) - offset} trailing bytes")
    if not values:
        raise InsufficientEnsembleError("ensemble file holds zero members")
    return Ensemble(grid, np.stack(values), seed=seed, tag=tag)


def export_csv(path, f: LogPermField) -> None:
    """Write ``i,j,log10_k_mD`` rows, i = x index, j = y index."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "log10_k_mD"])
        for j in range(f.grid.ny):
            for i in range(f.grid.nx):
                w.writerow([i, j, repr(float(f.values[j, i]))])


def import_csv(path, grid: GridSpec) -> LogPermField:
    vals = np.full(grid.shape, np.nan)
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            vals[int(row["j"]), int(row["i"])] = float(row["log10_k_mD"])
    return LogPermField(grid, vals)


def stack_maps(grid: GridSpec, maps: Iterable[np.ndarray], tag: str) -> Ensemble:
    """Wrap a sequence of (ny, nx) maps as an Ensemble for grid-stack persistence."""
    return Ensemble(grid, np.stack([np.asarray(m).reshape(grid.shape) for m in maps]), tag=tag)
