"""Synthetic sensitivity plumes with smoothly varying transport.

A plume is built by following a particle backward in time from its release
point through a wind field whose direction and speed drift smoothly in time
and vary gently in space, depositing Gaussian puffs that widen with travel
time and fade with age.  Nearby releases in space and time therefore give
similar plumes, which is all the emulators need.

The direction and speed perturbations are random Fourier feature draws of
stationary Gaussian processes with squared-exponential covariance, so
directions a time gap ``g`` apart correlate like ``exp(-g^2 / (2 P^2))``
for drift period ``P`` and the pattern never recurs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .plume import GridSpec, Plume, PlumeSet

N_FEATURES = 32


@dataclass(frozen=True)
class WindField:
    """Direction (radians, counter-clockwise from east) and speed of backward transport."""

    base_speed: float = 0.35                 # degrees per hour
    base_direction: float = 0.0
    direction_drift_amplitude: float = 0.6   # radians, standard deviation of the drift
    drift_period: float = 16.0               # hours, correlation time of the drift
    speed_variability: float = 0.25          # standard deviation of log speed
    warp_amplitude: float = 0.15             # radians, spatial direction perturbation
    warp_wavelength: float = 20.0            # degrees
    seed: int = 0

    def __post_init__(self):
        if self.base_speed <= 0 or self.drift_period <= 0 or self.warp_wavelength <= 0:
            raise ValueError("speed, drift period and warp wavelength must be positive")

    @cached_property
    def _features(self):
        rng = np.random.default_rng(self.seed)
        w = 1.0 / self.drift_period
        k = 2 * math.pi / self.warp_wavelength
        return {
            "dir_freq": rng.normal(0.0, w, N_FEATURES),
            "dir_phase": rng.uniform(0, 2 * math.pi, N_FEATURES),
            "speed_freq": rng.normal(0.0, w, N_FEATURES),
            "speed_phase": rng.uniform(0, 2 * math.pi, N_FEATURES),
            "warp_wave": rng.normal(0.0, k, (N_FEATURES, 2)),
            "warp_phase": rng.uniform(0, 2 * math.pi, N_FEATURES),
        }

    @staticmethod
    def _rff(arg: np.ndarray) -> np.ndarray:
        return math.sqrt(2.0 / N_FEATURES) * np.cos(arg).sum(axis=-1)

    def direction(self, lon, lat, hours) -> np.ndarray:
        f = self._features
        lon, lat, hours = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (lon, lat, hours)))
        drift = self._rff(hours[..., None] * f["dir_freq"] + f["dir_phase"])
        warp = self._rff(lon[..., None] * f["warp_wave"][:, 0] + lat[..., None] * f["warp_wave"][:, 1]
                         + f["warp_phase"])
        return self.base_direction + self.direction_drift_amplitude * drift + self.warp_amplitude * warp

    def speed(self, hours) -> np.ndarray:
        f = self._features
        h = np.asarray(hours, dtype=float)
        return self.base_speed * np.exp(self.speed_variability
                                        * self._rff(h[..., None] * f["speed_freq"] + f["speed_phase"]))


@dataclass(frozen=True)
class PuffConfig:
    duration: float = 36.0        # hours of backward travel
    step: float = 0.25            # hours
    decay: float = 12.0           # hours, e-folding of puff weight with age
    width0: float = 0.25          # degrees
    width_growth: float = 0.08    # degrees per sqrt(hour)
    mass_budget: float = 10.0     # upper bound on the plume's summed values


def particle_path(origin: tuple[float, float], hours0: float, wind: WindField,
                  cfg: PuffConfig = PuffConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Positions ``(n, 2)`` and ages ``(n,)`` of the backward path, Euler-integrated."""
    n = int(round(cfg.duration / cfg.step)) + 1
    ages = np.arange(n) * cfg.step
    pos = np.empty((n, 2))
    pos[0] = origin
    for i in range(1, n):
        t = hours0 - ages[i - 1]
        theta = float(wind.direction(pos[i - 1, 0], pos[i - 1, 1], t))
        v = float(wind.speed(t))
        pos[i] = pos[i - 1] + cfg.step * v * np.array([math.cos(theta), math.sin(theta)])
    return pos, ages


def generate_plume(origin: tuple[float, float], time: int, wind: WindField, grid: GridSpec,
                   cfg: PuffConfig = PuffConfig()) -> Plume:
    """One plume released at ``origin`` at ``time`` (integer seconds)."""
    if not grid.contains(origin[0], origin[1]):
        raise ValueError(f"origin {origin} lies outside the grid")
    hours0 = time / 3600.0
    pos, ages = particle_path(origin, hours0, wind, cfg)
    weights = np.exp(-ages / cfg.decay)
    weights *= cfg.mass_budget / weights.sum()
    widths = cfg.width0 + cfg.width_growth * np.sqrt(ages)
    lon, lat = grid.centers()
    cell = grid.d_lon * grid.d_lat
    out = np.zeros(grid.shape)
    for (x, y), w, s in zip(pos, weights, widths):
        g = np.exp(-((lon - x) ** 2 + (lat - y) ** 2) / (2 * s * s)) * (cell / (2 * math.pi * s * s))
        total = g.sum()
        if total > 1.0:  # never deposit more than the puff's share
            g /= total
        out += w * g
    angle = float(wind.direction(origin[0], origin[1], hours0))
    angle = math.atan2(math.sin(angle), math.cos(angle))
    return Plume(grid, out, (float(origin[0]), float(origin[1])), int(time), angle)


def generate_dataset(n: int, bounds: tuple[float, float, float, float],
                     time_range: tuple[int, int], wind: WindField, grid: GridSpec,
                     seed: int = 0, cfg: PuffConfig = PuffConfig()) -> PlumeSet:
    """``n`` plumes with origins uniform in ``(lon0, lon1, lat0, lat1)`` and times uniform in range."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lon0, lon1, lat0, lat1 = bounds
    rng = np.random.default_rng(seed)
    lons = rng.uniform(lon0, lon1, n)
    lats = rng.uniform(lat0, lat1, n)
    times = rng.integers(time_range[0], time_range[1], n, endpoint=True)
    return PlumeSet(grid, tuple(generate_plume((lo, la), int(t), wind, grid, cfg)
                                for lo, la, t in zip(lons, lats, times)))


def generate_site_series(sites, times, wind: WindField, grid: GridSpec,
                         cfg: PuffConfig = PuffConfig()) -> PlumeSet:
    """Plumes for every (time, site) pair, ordered by time then site."""
    plumes = [generate_plume(tuple(site), int(t), wind, grid, cfg)
              for t in times for site in sites]
    return PlumeSet(grid, tuple(plumes))
