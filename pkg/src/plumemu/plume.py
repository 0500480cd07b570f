"""Grids, plumes, plume sets and the error metrics used to compare them.

Values are stored as ``(n_lat, n_lon)`` arrays, so the flattened sensitivity
vector runs longitude-fastest.  Cell ``(j, i)`` has its centre at
``(lon_min + (i + 0.5) * d_lon, lat_min + (j + 0.5) * d_lat)``.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, GridMismatchError

UNITS = "ns g-1"
RAW_UNITS = "s m3 kg-1"
MAGIC = "PLUMESET1"


@dataclass(frozen=True)
class GridSpec:
    n_lon: int = 128
    n_lat: int = 128
    lon_min: float = 0.0
    lat_min: float = 0.0
    d_lon: float = 0.352
    d_lat: float = 0.234

    def __post_init__(self):
        if self.n_lon < 1 or self.n_lat < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not (self.d_lon > 0 and self.d_lat > 0):
            raise ValueError("grid spacing must be positive")
        if not (-90.0 <= self.lat_min and self.lat_max <= 90.0):
            raise ValueError(f"latitudes [{self.lat_min}, {self.lat_max}] outside [-90, 90]")
        if not (-180.0 <= self.lon_min and self.lon_max <= 180.0):
            raise ValueError(f"longitudes [{self.lon_min}, {self.lon_max}] outside [-180, 180]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def size(self) -> int:
        return self.n_lon * self.n_lat

    @property
    def lon_max(self) -> float:
        return self.lon_min + self.n_lon * self.d_lon

    @property
    def lat_max(self) -> float:
        return self.lat_min + self.n_lat * self.d_lat

    def lon_centers(self) -> np.ndarray:
        return self.lon_min + (np.arange(self.n_lon) + 0.5) * self.d_lon

    def lat_centers(self) -> np.ndarray:
        return self.lat_min + (np.arange(self.n_lat) + 0.5) * self.d_lat

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Longitude and latitude of every cell centre, each shaped like the grid."""
        return np.meshgrid(self.lon_centers(), self.lat_centers())

    def contains(self, lon: float, lat: float) -> bool:
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    def shifted(self, dlon: float, dlat: float) -> "GridSpec":
        return replace(self, lon_min=self.lon_min + dlon, lat_min=self.lat_min + dlat)

    def canonical(self, n_lon: int | None = None, n_lat: int | None = None) -> "GridSpec":
        """Grid with the same extent, centred on (0, 0), optionally at another resolution."""
        n_lon = n_lon or self.n_lon
        n_lat = n_lat or self.n_lat
        width = self.n_lon * self.d_lon
        height = self.n_lat * self.d_lat
        d_lon = self.d_lon if n_lon == self.n_lon else width / n_lon
        d_lat = self.d_lat if n_lat == self.n_lat else height / n_lat
        return GridSpec(n_lon, n_lat, -n_lon * d_lon / 2, -n_lat * d_lat / 2, d_lon, d_lat)


@dataclass(frozen=True, eq=False)
class Plume:
    """One sensitivity field with its release point and time."""

    grid: GridSpec
    values: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    time: int = 0
    departure_angle: float | None = None
    units: str = UNITS

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.size != self.grid.size:
            raise DimensionError("plume values", expected=self.grid.size, got=v.size)
        v = v.reshape(self.grid.shape)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "time", int(self.time))

    @property
    def vector(self) -> np.ndarray:
        return self.values.ravel()

    def with_values(self, values, **changes) -> "Plume":
        return replace(self, values=values, **changes)


@dataclass(frozen=True)
class FluxField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != self.grid.size:
            raise DimensionError("flux values", expected=self.grid.size, got=v.size)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class PlumeSet(Sequence):
    grid: GridSpec
    plumes: tuple[Plume, ...] = field(default_factory=tuple)

    def __post_init__(self):
        plumes = tuple(self.plumes)
        for p in plumes:
            if p.grid != self.grid:
                raise GridMismatchError(f"plume grid {p.grid} differs from set grid {self.grid}")
        object.__setattr__(self, "plumes", plumes)

    @classmethod
    def from_plumes(cls, plumes: Iterable[Plume]) -> "PlumeSet":
        plumes = tuple(plumes)
        if not plumes:
            raise ValueError("cannot infer a grid from an empty plume list")
        return cls(plumes[0].grid, plumes)

    def __len__(self) -> int:
        return len(self.plumes)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return PlumeSet(self.grid, self.plumes[i])
        return self.plumes[i]

    def __iter__(self) -> Iterator[Plume]:
        return iter(self.plumes)

    def subset(self, indices: Iterable[int]) -> "PlumeSet":
        return PlumeSet(self.grid, tuple(self.plumes[i] for i in indices))

    def matrix(self) -> np.ndarray:
        """The N×K matrix whose rows are the flattened plumes."""
        if not self.plumes:
            return np.zeros((0, self.grid.size))
        return np.stack([p.vector for p in self.plumes])

    def images(self) -> np.ndarray:
        return self.matrix().reshape(len(self), *self.grid.shape)


def apply_sensitivity(plumes: PlumeSet, flux: FluxField) -> np.ndarray:
    """Mole fractions ``B @ flux`` for each plume row of ``B``."""
    if plumes.grid != flux.grid:
        raise GridMismatchError("plume and flux grids differ")
    return plumes.matrix() @ flux.values


def mse(a: Plume, b: Plume) -> float:
    va, vb = np.asarray(getattr(a, "vector", a)), np.asarray(getattr(b, "vector", b))
    va, vb = va.ravel(), vb.ravel()
    if va.shape != vb.shape:
        raise DimensionError("mse", expected=va.shape, got=vb.shape)
    d = va - vb
    return float(np.dot(d, d) / d.size)


def sum_mse(A: Sequence[Plume], B: Sequence[Plume]) -> float:
    if len(A) != len(B):
        raise DimensionError("sum_mse", expected=len(A), got=len(B))
    return float(sum(mse(a, b) for a, b in zip(A, B)))


def truncate_negatives(p: Plume) -> Plume:
    return p.with_values(np.maximum(p.values, 0.0))


# file format -----------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_plumeset(path: str | os.PathLike, plumes: PlumeSet) -> None:
    """Write the PLUMESET1 format: text header, then little-endian float64 blocks."""
    g = plumes.grid
    units = plumes[0].units if len(plumes) else UNITS
    lines = [
        MAGIC,
        ",".join([str(g.n_lon), str(g.n_lat), _fmt(g.lon_min), _fmt(g.lat_min),
                  _fmt(g.d_lon), _fmt(g.d_lat)]),
        units,
        str(len(plumes)),
    ]
    for p in plumes:
        lines.append(",".join([_fmt(p.origin[0]), _fmt(p.origin[1]), str(p.time),
                               _fmt(p.departure_angle)]))
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for p in plumes:
            fh.write(p.vector.astype("<f8").tobytes())


def read_plumeset(path: str | os.PathLike) -> PlumeSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)

    def line() -> str:
        return buf.readline().decode("ascii").rstrip("\n")

    if line() != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    n_lon, n_lat, lon_min, lat_min, d_lon, d_lat = line().split(",")
    grid = GridSpec(int(n_lon), int(n_lat), float(lon_min), float(lat_min),
                    float(d_lon), float(d_lat))
    units = line()
    count = int(line())
    meta = []
    for _ in range(count):
        lon, lat, t, angle = line().split(",")
        meta.append((float(lon), float(lat), int(t), float(angle) if angle else None))
    data = np.frombuffer(raw, dtype="<f8", offset=buf.tell())
    if data.size != count * grid.size:
        raise ValueError(f"{path}: expected {count * grid.size} values, found {data.size}")
    data = data.reshape(count, grid.size).astype(np.float64)
    plumes = tuple(Plume(grid, data[i], (lon, lat), t, angle, units)
                   for i, (lon, lat, t, angle) in enumerate(meta))
    return PlumeSet(grid, plumes)
