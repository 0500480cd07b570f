"""Turning raw plumes into canonical training images.

Geometry is planar in degrees: longitude is the x axis and latitude the y
axis, which is adequate inside a regional grid.  All resampling uses inverse
distance weighting over the ``k`` nearest source cell centres.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import AngleUndeterminable
from .plume import RAW_UNITS, UNITS, GridSpec, Plume, PlumeSet

log = logging.getLogger(__name__)

MOLAR_MASS_AIR = 28.9644
MOLAR_MASS_CH4 = 16.0425


@dataclass(frozen=True)
class ConversionConfig:
    cell_volume: float | np.ndarray
    molar_mass_air: float = MOLAR_MASS_AIR
    molar_mass_ch4: float = MOLAR_MASS_CH4

    def __post_init__(self):
        if np.any(np.asarray(self.cell_volume) <= 0):
            raise ValueError("cell volume must be positive")
        if self.molar_mass_air <= 0 or self.molar_mass_ch4 <= 0:
            raise ValueError("molar masses must be positive")


@dataclass(frozen=True)
class PreprocessConfig:
    annulus_inner: float = 0.5
    annulus_outer: float = 1.5
    window_radius: float = 2.0
    idw_power: float = 2.0
    idw_k: int = 4
    target_res: int = 64


@dataclass(frozen=True)
class AngleEstimate:
    angle: float
    east: float
    north: float

    @classmethod
    def from_angle(cls, angle: float) -> "AngleEstimate":
        angle = wrap_angle(angle)
        return cls(angle, math.cos(angle), math.sin(angle))


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


def convert_units(raw: Plume, cfg: ConversionConfig) -> Plume:
    """Time-summed residence output (s m3 kg-1) to sensitivities in ns g-1."""
    if raw.units != RAW_UNITS:
        raise ValueError(f"expected units {RAW_UNITS!r}, plume is tagged {raw.units!r}")
    volume = np.asarray(cfg.cell_volume, dtype=float)
    if volume.ndim:
        volume = volume.reshape(raw.grid.shape)
    factor = 1e-3 * (cfg.molar_mass_air / cfg.molar_mass_ch4) * 1e9
    return raw.with_values(raw.values / volume * factor, units=UNITS)


def weak_signal_threshold(plumes: PlumeSet, quantile: float = 0.995) -> float:
    return float(np.quantile(plumes.matrix(), quantile))


def weak_signal_filter(plumes: PlumeSet, keep_threshold_quantile: float = 0.995,
                       min_cells: int = 10) -> PlumeSet:
    """Drop plumes with at most ``min_cells`` values above the pooled quantile."""
    if len(plumes) == 0:
        raise ValueError("weak_signal_filter needs at least one plume")
    threshold = weak_signal_threshold(plumes, keep_threshold_quantile)
    counts = (plumes.matrix() > threshold).sum(axis=1)
    keep = np.flatnonzero(counts > min_cells)
    if len(keep) < len(plumes):
        log.info("weak-signal filter removed %d of %d plumes", len(plumes) - len(keep), len(plumes))
    return plumes.subset(keep)


def estimate_departure_angle(p: Plume, annulus_inner: float = 0.5, annulus_outer: float = 1.5,
                             window_radius: float = 2.0) -> AngleEstimate:
    """Direction in which the plume leaves its origin.

    The strongest cell inside the annulus gives a rough direction ``a``; the
    estimate is then the sensitivity-weighted circular mean direction of cells
    within 45 degrees of ``a`` whose distance from the origin lies between
    ``annulus_inner`` and ``window_radius``.  Cells closer than the inner
    radius subtend poorly resolved angles and are left out.
    """
    lon, lat = p.grid.centers()
    dx = lon - p.origin[0]
    dy = lat - p.origin[1]
    dist = np.hypot(dx, dy)
    v = p.values
    ring = (dist >= annulus_inner) & (dist <= annulus_outer) & (v > 0)
    if not ring.any():
        raise AngleUndeterminable("no positive sensitivity inside the search annulus")
    k = np.argmax(np.where(ring, v, -np.inf))
    a = math.atan2(dy.flat[k], dx.flat[k])
    theta = np.arctan2(dy, dx)
    in_window = (np.abs(wrap_angle(theta - a)) < np.pi / 4) & (dist <= window_radius) \
        & (dist >= annulus_inner) & (v > 0)
    w = v[in_window]
    angle = math.atan2(np.sum(w * np.sin(theta[in_window])), np.sum(w * np.cos(theta[in_window])))
    return AngleEstimate.from_angle(angle)


# resampling ------------------------------------------------------------------

@lru_cache(maxsize=32)
def _tree(grid: GridSpec) -> cKDTree:
    lon, lat = grid.centers()
    return cKDTree(np.column_stack([lon.ravel(), lat.ravel()]))


def idw_sample(grid: GridSpec, values: np.ndarray, qlon: np.ndarray, qlat: np.ndarray,
               power: float = 2.0, k: int = 4, max_distance: float | None = None,
               warn: bool = True) -> np.ndarray:
    """Inverse-distance-weighted values of gridded fields at query points.

    ``values`` has shape ``(..., K)`` (grid flattened lon-fastest) and the
    query arrays shape ``(..., Q)`` with matching leading axes, or plain
    ``(Q,)`` shared by every field.  Query points with no source centre
    within ``max_distance`` (default: one cell diagonal) get 0.
    """
    values = np.asarray(values, dtype=float)
    qlon, qlat = np.asarray(qlon, dtype=float), np.asarray(qlat, dtype=float)
    if max_distance is None:
        max_distance = math.hypot(grid.d_lon, grid.d_lat)
    k = min(k, grid.size)
    pts = np.column_stack([qlon.ravel(), qlat.ravel()])
    dist, idx = _tree(grid).query(pts, k=k, distance_upper_bound=max_distance * (1 + 1e-12))
    dist = dist.reshape(len(pts), k)
    idx = idx.reshape(len(pts), k)
    valid = np.isfinite(dist)
    idx = np.where(valid, idx, 0)
    hit = dist[:, 0] <= 1e-9 * max_distance
    with np.errstate(divide="ignore"):
        w = np.where(valid, np.where(dist > 0, dist, np.inf) ** -power, 0.0)
    w[hit] = 0.0
    w[hit, 0] = 1.0
    wsum = w.sum(axis=1)
    empty = wsum == 0
    if warn and empty.any():
        log.warning("idw: %d of %d query points have no source cell in range; set to 0",
                    int(empty.sum()), len(pts))
    w = w / np.where(empty, 1.0, wsum)[:, None]
    w = w.reshape(qlon.shape + (k,))
    idx = idx.reshape(qlon.shape + (k,))
    if qlon.ndim == 1:
        return np.einsum("...qk,qk->...q", values[..., idx], w)
    gathered = np.take_along_axis(values, idx.reshape(idx.shape[:-2] + (-1,)), axis=-1)
    return np.sum(gathered.reshape(idx.shape) * w, axis=-1)


def idw_resample(p: Plume, target: GridSpec, power: float = 2.0, k_neighbors: int = 4,
                 max_distance: float | None = None) -> Plume:
    lon, lat = target.centers()
    out = idw_sample(p.grid, p.vector, lon.ravel(), lat.ravel(), power, k_neighbors, max_distance)
    return Plume(target, out, p.origin, p.time, p.departure_angle, p.units)


def rotate_to_canonical(p: Plume, angle: float | None = None, power: float = 2.0,
                        k_neighbors: int = 4) -> Plume:
    """Shift the origin to (0, 0) and rotate by ``-angle`` so the plume leaves eastward.

    Works by pull-back: each canonical cell samples the source at its rotated
    position, so no holes appear.  Cells that map outside the source grid are 0.
    """
    if angle is None:
        angle = p.departure_angle if p.departure_angle is not None \
            else estimate_departure_angle(p).angle
    if not math.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    target = p.grid.canonical()
    x, y = target.centers()
    c, s = math.cos(angle), math.sin(angle)
    src_lon = p.origin[0] + c * x - s * y
    src_lat = p.origin[1] + s * x + c * y
    out = idw_sample(p.grid, p.vector, src_lon.ravel(), src_lat.ravel(), power, k_neighbors,
                     warn=False)
    return Plume(target, out, (0.0, 0.0), p.time, 0.0, p.units)


def translate_to_site(p: Plume, site: tuple[float, float]) -> Plume:
    """Re-anchor a plume so its origin sits at ``site``; values are untouched."""
    dlon, dlat = site[0] - p.origin[0], site[1] - p.origin[1]
    return Plume(p.grid.shifted(dlon, dlat), p.values, (site[0], site[1]), p.time,
                 p.departure_angle, p.units)


def place_canonical(images: np.ndarray, canonical: GridSpec, angles: np.ndarray,
                    site: tuple[float, float], target: GridSpec, power: float = 2.0,
                    k_neighbors: int = 4) -> np.ndarray:
    """Rotate canonical images to ``angles``, move them to ``site`` and sample on ``target``.

    The three steps are applied as one pull-back per target cell, so each
    image is interpolated once.  ``images`` is ``(S, K_canonical)``; returns
    ``(S, K_target)``.
    """
    images = np.atleast_2d(images)
    angles = np.broadcast_to(np.asarray(angles, dtype=float), (images.shape[0],))
    lon, lat = target.centers()
    x = lon.ravel() - site[0]
    y = lat.ravel() - site[1]
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    qx = c * x + s * y
    qy = -s * x + c * y
    return idw_sample(canonical, images, qx, qy, power, k_neighbors, warn=False)


def canonicalize(p: Plume, cfg: PreprocessConfig = PreprocessConfig(),
                 angle: AngleEstimate | None = None) -> tuple[Plume, AngleEstimate]:
    """Estimate the departure angle, rotate to the canonical frame and reduce resolution."""
    if angle is None:
        angle = estimate_departure_angle(p, cfg.annulus_inner, cfg.annulus_outer,
                                         cfg.window_radius)
    rotated = rotate_to_canonical(p, angle.angle, cfg.idw_power, cfg.idw_k)
    low = rotated.grid.canonical(cfg.target_res, cfg.target_res)
    if low != rotated.grid:
        rotated = idw_resample(rotated, low, cfg.idw_power, cfg.idw_k)
    return rotated, angle


def canonicalize_set(plumes: PlumeSet, cfg: PreprocessConfig = PreprocessConfig()
                     ) -> tuple[PlumeSet, list[AngleEstimate], list[int]]:
    """Canonicalise every plume whose angle can be estimated.

    Returns the canonical set, the angle estimates and the indices (into
    ``plumes``) that survived.
    """
    out, angles, kept = [], [], []
    for i, p in enumerate(plumes):
        try:
            c, a = canonicalize(p, cfg)
        except AngleUndeterminable:
            log.warning("plume %d: departure angle undeterminable, skipped", i)
            continue
        out.append(c)
        angles.append(a)
        kept.append(i)
    grid = plumes.grid.canonical(cfg.target_res, cfg.target_res)
    return PlumeSet(grid, tuple(out)), angles, kept
