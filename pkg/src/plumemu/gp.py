"""Spatio-temporal Gaussian-process emulators, one per latent feature.

Kernel (space in degrees, time in hours)::

    k(a, b) = var * exp(-|s_a - s_b|^2 / (2 l_s) - |t_a - t_b| / (2 l_t)) ** 2

The outer square is kept as written, so the effective inverse length scales
are twice the nominal ones.  The prior mean is zero and there is no nugget;
a relative diagonal jitter ``eps * var`` is added only to keep the Cholesky
factorisation stable.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import DimensionError, GpFitError

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
# log-space bounds: variance, spatial length (deg^2), temporal length (hours)
LOG_BOUNDS = ((math.log(1e-10), math.log(1e10)),
              (math.log(1e-4), math.log(1e6)),
              (math.log(1e-3), math.log(1e6)))
SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class StPoint:
    lon: float
    lat: float
    time: float  # hours

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.lon, self.lat, self.time)):
            raise ValueError("space-time point must be finite")

    @classmethod
    def from_seconds(cls, lon: float, lat: float, seconds: int) -> "StPoint":
        return cls(float(lon), float(lat), seconds / SECONDS_PER_HOUR)


def as_points(points) -> np.ndarray:
    """An (N, 3) array of lon, lat, hours from StPoints or anything array-like."""
    if len(points) and isinstance(points[0], StPoint):
        return np.array([[p.lon, p.lat, p.time] for p in points], dtype=np.float64)
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return arr


@dataclass(frozen=True)
class GpHyper:
    log_variance: float = 0.0
    log_length_space: float = 0.0
    log_length_time: float = 0.0

    @classmethod
    def from_values(cls, variance: float, length_space: float, length_time: float) -> "GpHyper":
        if min(variance, length_space, length_time) <= 0:
            raise ValueError("GP hyperparameters must be positive")
        return cls(math.log(variance), math.log(length_space), math.log(length_time))

    @property
    def variance(self) -> float:
        return math.exp(self.log_variance)

    @property
    def length_space(self) -> float:
        return math.exp(self.log_length_space)

    @property
    def length_time(self) -> float:
        return math.exp(self.log_length_time)

    def as_array(self) -> np.ndarray:
        return np.array([self.log_variance, self.log_length_space, self.log_length_time])


def _sq_space(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2


def _abs_time(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, 2] - b[None, :, 2])


def _correlation(ds: np.ndarray, dt: np.ndarray, h: GpHyper) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.exp(-ds / (2 * h.length_space) - dt / (2 * h.length_time)) ** 2


def kernel(a: StPoint, b: StPoint, h: GpHyper) -> float:
    ds = (a.lon - b.lon) ** 2 + (a.lat - b.lat) ** 2
    dt = abs(a.time - b.time)
    return h.variance * math.exp(-ds / (2 * h.length_space) - dt / (2 * h.length_time)) ** 2


def kernel_matrix(A, B, h: GpHyper) -> np.ndarray:
    A, B = as_points(A), as_points(B)
    return h.variance * _correlation(_sq_space(A, B), _abs_time(A, B), h)


def _factor(R: np.ndarray, jitter: float | None) -> tuple[np.ndarray, float]:
    """Cholesky of ``R + eps I`` with escalating relative jitter ``eps``."""
    n = len(R)
    tries = [] if jitter is None else [jitter]
    eps = JITTER_START if not jitter else jitter * 10
    while eps <= JITTER_MAX * (1 + 1e-9):
        if jitter is None or eps > jitter:
            tries.append(eps)
        eps *= 10
    if not np.all(np.isfinite(R)):
        tries = []
    for eps in tries:
        try:
            L = np.linalg.cholesky(R + eps * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, eps
    raise GpFitError(f"kernel matrix not positive definite even with jitter {JITTER_MAX:g}")


@dataclass(frozen=True, eq=False)
class GpModel:
    hyper: GpHyper
    train_points: np.ndarray    # (N, 3)
    train_targets: np.ndarray   # (N,)
    jitter: float               # relative: the diagonal carries var * (1 + jitter)
    gram_factor: np.ndarray = field(repr=False)   # lower Cholesky factor of S(W,W) + jitter*var*I
    alpha: np.ndarray = field(repr=False)
    log_likelihood: float = float("nan")

    @classmethod
    def condition(cls, points, targets, hyper: GpHyper, jitter: float | None = None) -> "GpModel":
        X = as_points(points)
        y = np.asarray(targets, dtype=np.float64).ravel()
        if len(X) != len(y):
            raise DimensionError("gp targets", expected=len(X), got=len(y))
        R = _correlation(_sq_space(X, X), _abs_time(X, X), hyper)
        Lr, eps = _factor(R, jitter)
        L = Lr * math.sqrt(hyper.variance)
        alpha = cho_solve((L, True), y)
        ll = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * math.log(2 * math.pi)
        return cls(hyper, X, y, eps, L, alpha, float(ll))

    @property
    def absolute_jitter(self) -> float:
        return self.jitter * self.hyper.variance

    def to_dict(self) -> dict:
        h = self.hyper
        return {"log_variance": h.log_variance, "log_length_space": h.log_length_space,
                "log_length_time": h.log_length_time, "jitter": self.jitter,
                "points": self.train_points.tolist(), "targets": self.train_targets.tolist(),
                "units": {"space": "degrees", "time": "hours"}}

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        h = GpHyper(d["log_variance"], d["log_length_space"], d["log_length_time"])
        return cls.condition(d["points"], d["targets"], h, jitter=d["jitter"])


def log_marginal_likelihood(theta, X: np.ndarray, y: np.ndarray,
                            jitter: float | None = None) -> tuple[float, np.ndarray]:
    """Exact log marginal likelihood and its gradient in log-hyperparameters."""
    h = GpHyper(*theta)
    ds, dt = _sq_space(X, X), _abs_time(X, X)
    R = _correlation(ds, dt, h)
    Lr, eps = _factor(R, jitter)
    var = h.variance
    L = Lr * math.sqrt(var)
    alpha = cho_solve((L, True), y)
    n = len(y)
    ll = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    # dK/dlog var = K, dK/dlog l = var * R * d / l
    g_var = 0.5 * (y @ alpha - n)
    g_ls = 0.5 * np.sum(W * (var * R * ds / h.length_space))
    g_lt = 0.5 * np.sum(W * (var * R * dt / h.length_time))
    return float(ll), np.array([g_var, g_ls, g_lt])


def default_init(X: np.ndarray, y: np.ndarray) -> GpHyper:
    ds = _sq_space(X, X)[np.triu_indices(len(X), 1)]
    dt = _abs_time(X, X)[np.triu_indices(len(X), 1)]
    ls = float(np.median(ds[ds > 0])) if np.any(ds > 0) else 1.0
    lt = float(np.median(dt[dt > 0])) if np.any(dt > 0) else 1.0
    var = float(np.mean(y * y)) if np.any(y) else 1.0
    return GpHyper.from_values(max(var, 1e-8), ls, lt)


def _clip(theta: np.ndarray) -> np.ndarray:
    lo = np.array([b[0] for b in LOG_BOUNDS])
    hi = np.array([b[1] for b in LOG_BOUNDS])
    return np.clip(theta, lo, hi)


def start_points(X: np.ndarray, y: np.ndarray, init: GpHyper | None = None,
                 restarts: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Log-space optimizer starts: ``init`` and seeded perturbations of it."""
    init = init or default_init(X, y)
    rng = np.random.default_rng(seed)
    starts = [_clip(init.as_array())]
    for _ in range(max(restarts, 1) - 1):
        starts.append(_clip(init.as_array() + rng.normal(0.0, 1.5, size=3)))
    return starts


def fit_mle(points, targets, init: GpHyper | None = None, restarts: int = 5,
            seed: int = 0, jitter: float | None = None) -> GpModel:
    """Maximum-likelihood hyperparameters by multi-start L-BFGS-B in log space.

    The first start is ``init`` (or a data-driven guess); the others perturb
    it with seeded Gaussian noise.  The best point seen, including every
    start, is kept.
    """
    X = as_points(points)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if len(X) < 2:
        raise ValueError("fit_mle needs at least two training points")
    if len(X) != len(y):
        raise DimensionError("gp targets", expected=len(X), got=len(y))
    starts = start_points(X, y, init, restarts, seed)

    def objective(theta):
        try:
            ll, g = log_marginal_likelihood(theta, X, y, jitter)
        except GpFitError:
            return 1e300, np.zeros(3)
        if not math.isfinite(ll):
            return 1e300, np.zeros(3)
        return -ll, -g

    best_theta, best_val = None, math.inf
    for theta0 in starts:
        val0 = objective(theta0)[0]
        if val0 < best_val:
            best_theta, best_val = theta0, val0
        res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=LOG_BOUNDS)
        if res.fun < best_val and np.all(np.isfinite(res.x)):
            best_theta, best_val = res.x, float(res.fun)
    if best_theta is None or best_val >= 1e300:
        raise GpFitError("no start produced a finite likelihood")
    return GpModel.condition(X, y, GpHyper(*map(float, best_theta)), jitter)


def posterior(model: GpModel, query) -> tuple[float, float]:
    if isinstance(query, StPoint):
        query = [query]
    mean, var = emulate_feature(model, query)
    return float(mean[0]), float(var[0])


def emulate_feature(model: GpModel, queries) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances at a batch of query points."""
    Q = as_points(queries) if len(queries) else np.zeros((0, 3))
    if len(Q) == 0:
        return np.zeros(0), np.zeros(0)
    Ks = kernel_matrix(Q, model.train_points, model.hyper)
    mean = Ks @ model.alpha
    v = solve_triangular(model.gram_factor, Ks.T, lower=True)
    var = model.hyper.variance - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def fit_features(points, targets: np.ndarray, restarts: int = 5, seed: int = 0,
                 jitter: float | None = None, n_jobs: int = 1) -> list[GpModel]:
    """Independent GP fits, one per column of ``targets``; failures name the column."""
    targets = np.asarray(targets, dtype=np.float64)
    seeds = np.random.SeedSequence(seed).generate_state(targets.shape[1])

    def one(j):
        try:
            return fit_mle(points, targets[:, j], restarts=restarts, seed=int(seeds[j]),
                           jitter=jitter)
        except GpFitError as exc:
            raise GpFitError(str(exc), feature=j) from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(one, range(targets.shape[1])))
    return [one(j) for j in range(targets.shape[1])]


def sample_features(models: Sequence[GpModel], query, n_samples: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Independent draws from each model's posterior at one query: (n_samples, n_models)."""
    stats = [posterior(m, query) for m in models]
    mean = np.array([s[0] for s in stats])
    sd = np.sqrt(np.array([s[1] for s in stats]))
    return mean + sd * rng.standard_normal((n_samples, len(models)))
