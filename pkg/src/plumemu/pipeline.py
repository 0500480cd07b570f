"""End-to-end emulation: hold-out split, bundle building, Monte Carlo emulation and scoring."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import os
import time as _time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cvae as cv
from . import eof as eo
from . import gp
from .errors import ConfigError, DimensionError
from .plume import GridSpec, Plume, PlumeSet, mse, write_plumeset
from .preprocess import AngleEstimate, PreprocessConfig, canonicalize_set, place_canonical
from .synth import PuffConfig, WindField, generate_site_series

log = logging.getLogger(__name__)

METRICS_HEADER = ["plume_index", "site_lon", "site_lat", "time", "mse_eof", "mse_cvae"]
METHODS = ("eof", "cvae")


# reducers ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Reducer:
    """Either an EOF basis or a trained CVAE, seen as features <-> canonical images."""

    kind: str
    eof: eo.EofBasis | None = None
    cvae: cv.CvaeModel | None = None

    def __post_init__(self):
        if self.kind not in METHODS or (self.kind == "eof") != (self.eof is not None) \
                or (self.kind == "cvae") != (self.cvae is not None):
            raise ConfigError(f"reducer kind {self.kind!r} does not match its artifact")

    @property
    def r(self) -> int:
        return self.eof.r if self.kind == "eof" else self.cvae.r

    def features(self, images: np.ndarray) -> np.ndarray:
        """(N, S, S) canonical images to (N, r) features."""
        images = np.asarray(images, dtype=np.float64)
        if self.kind == "eof":
            return eo.regress_coefficients(self.eof, images.reshape(len(images), -1))
        return cv.encode_batch(self.cvae, images)[0]

    def images(self, feats: np.ndarray) -> np.ndarray:
        """(M, r) features to (M, K) flattened canonical images."""
        feats = np.atleast_2d(feats)
        if self.kind == "eof":
            out = eo.reconstruct(self.eof, feats)
            return out.matrix() if isinstance(out, PlumeSet) else out
        return cv.decode(self.cvae, feats).reshape(len(feats), -1)

    def save(self, path: str | os.PathLike) -> None:
        if self.kind == "eof":
            eo.save_basis(path, self.eof)
        else:
            cv.save_model(path, self.cvae)

    @classmethod
    def load(cls, kind: str, path: str | os.PathLike) -> "Reducer":
        if kind == "eof":
            return cls("eof", eof=eo.load_basis(path))
        if kind == "cvae":
            return cls("cvae", cvae=cv.load_model(path))
        raise ConfigError(f"unknown reducer {kind!r}")


# hold-out split ----------------------------------------------------------------

def holdout_order(plumes: PlumeSet) -> list[int]:
    return sorted(range(len(plumes)), key=lambda i: (plumes[i].time, plumes[i].origin))


def holdout_split(plumes: PlumeSet) -> tuple[PlumeSet, PlumeSet, list[int], list[int]]:
    """Sort by (time, site); even positions are kept, odd ones removed.

    Returns both sets and their indices into ``plumes``.
    """
    if len(plumes) < 2:
        raise ValueError("hold-out split needs at least two plumes")
    order = holdout_order(plumes)
    kept, removed = order[0::2], order[1::2]
    return plumes.subset(kept), plumes.subset(removed), kept, removed


# bundle --------------------------------------------------------------------------

def _grid_dict(g: GridSpec) -> dict:
    return asdict(g)


def st_points(plumes) -> np.ndarray:
    return np.array([[p.origin[0], p.origin[1], p.time / 3600.0] for p in plumes])


@dataclass(frozen=True, eq=False)
class EmulationBundle:
    reducer: Reducer
    models: tuple[gp.GpModel, ...]     # r feature GPs, then east and north angle components
    preprocess: PreprocessConfig
    canonical_grid: GridSpec
    output_grid: GridSpec
    feature_targets: np.ndarray = field(repr=False)
    angle_targets: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.models) != self.reducer.r + 2:
            raise DimensionError("bundle GP count", expected=self.reducer.r + 2, got=len(self.models))

    def save(self, path: str | os.PathLike, reducer_path: str) -> None:
        doc = {"reducer": self.reducer.kind, "reducer_path": reducer_path,
               "preprocess": asdict(self.preprocess),
               "canonical_grid": _grid_dict(self.canonical_grid),
               "output_grid": _grid_dict(self.output_grid),
               "feature_targets": self.feature_targets.tolist(),
               "angle_targets": self.angle_targets.tolist(),
               "gps": [m.to_dict() for m in self.models]}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmulationBundle":
        doc = json.loads(Path(path).read_text())
        rpath = Path(doc["reducer_path"])
        if not rpath.is_absolute():
            rpath = Path(path).parent / rpath
        return cls(Reducer.load(doc["reducer"], rpath),
                   tuple(gp.GpModel.from_dict(d) for d in doc["gps"]),
                   PreprocessConfig(**doc["preprocess"]),
                   GridSpec(**doc["canonical_grid"]), GridSpec(**doc["output_grid"]),
                   np.array(doc["feature_targets"]), np.array(doc["angle_targets"]))


def prepare(kept: PlumeSet, cfg: PreprocessConfig = PreprocessConfig()
            ) -> tuple[PlumeSet, list[AngleEstimate], list[int]]:
    """Canonical images, angle estimates and surviving indices for the kept plumes."""
    return canonicalize_set(kept, cfg)


def build_bundle(kept: PlumeSet, reducer: Reducer, cfg: PreprocessConfig = PreprocessConfig(),
                 seed: int = 0, jitter: float | None = None, restarts: int = 5,
                 prepared=None) -> EmulationBundle:
    """Reduce the kept plumes to features and fit one GP per feature and angle component."""
    canon, angles, idx = prepared if prepared is not None else prepare(kept, cfg)
    if len(idx) < 2:
        raise ValueError("fewer than two kept plumes have a usable departure angle")
    feats = reducer.features(canon.images())
    ang = np.array([[a.east, a.north] for a in angles])
    points = st_points(kept.subset(idx))
    models = gp.fit_features(points, np.hstack([feats, ang]), restarts=restarts, seed=seed,
                             jitter=jitter)
    return EmulationBundle(reducer, tuple(models), cfg, canon.grid, kept.grid, feats, ang)


@dataclass(frozen=True, eq=False)
class EmulatedPlume:
    mean_plume: Plume
    stderr_plume: Plume
    n_samples: int


def emulate(bundle: EmulationBundle, site: tuple[float, float], time: int,
            n_samples: int = 100, seed: int | np.random.Generator = 0) -> EmulatedPlume:
    """Monte Carlo emulation of the plume released at ``site`` at ``time`` (seconds)."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = bundle.reducer.r
    query = gp.StPoint(float(site[0]), float(site[1]), time / 3600.0)
    draws = gp.sample_features(bundle.models, query, n_samples, rng)
    east, north = draws[:, r], draws[:, r + 1]
    # atan2 ignores the length of (east, north), so normalising would change nothing
    angles = np.arctan2(north, east)
    canon = bundle.reducer.images(draws[:, :r])
    cfg = bundle.preprocess
    placed = place_canonical(canon, bundle.canonical_grid, angles, site, bundle.output_grid,
                             cfg.idw_power, cfg.idw_k)
    placed = np.maximum(placed, 0.0)
    mean = placed.mean(axis=0)
    std = placed.std(axis=0)
    g = bundle.output_grid
    return EmulatedPlume(Plume(g, mean, site, time), Plume(g, std, site, time), n_samples)


def reconstruct_kept(bundle: EmulationBundle, i: int, site, time: int) -> Plume:
    """The i-th kept plume after reduce, reconstruct and placement at its own angle."""
    canon = bundle.reducer.images(bundle.feature_targets[i:i + 1])
    e, n = bundle.angle_targets[i]
    cfg = bundle.preprocess
    out = place_canonical(canon, bundle.canonical_grid, [math.atan2(n, e)], site,
                          bundle.output_grid, cfg.idw_power, cfg.idw_k)
    return Plume(bundle.output_grid, np.maximum(out[0], 0.0), site, time)


# evaluation ----------------------------------------------------------------------

@dataclass
class MetricsTable:
    rows: list[dict]

    def sum_mse(self, method: str) -> float:
        return float(sum(row[f"mse_{method}"] for row in self.rows))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for row in self.rows:
                w.writerow([row["plume_index"], repr(row["site_lon"]), repr(row["site_lat"]),
                            row["time"], repr(row["mse_eof"]), repr(row["mse_cvae"])])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "MetricsTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRICS_HEADER:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            rows = [{"plume_index": int(r["plume_index"]), "site_lon": float(r["site_lon"]),
                     "site_lat": float(r["site_lat"]), "time": int(r["time"]),
                     "mse_eof": float(r["mse_eof"]), "mse_cvae": float(r["mse_cvae"])}
                    for r in reader]
        return cls(rows)


def evaluate(removed: PlumeSet, emulations: dict[str, list], indices=None) -> MetricsTable:
    """Per-plume mse of each method's emulated mean against the removed truth.

    ``emulations`` maps method name to a list aligned with ``removed``; a
    missing method gets nan.  ``indices`` labels the rows (default 0..M-1).
    """
    indices = list(range(len(removed))) if indices is None else list(indices)
    for name, ems in emulations.items():
        if len(ems) != len(removed):
            raise DimensionError(f"emulations for {name}", expected=len(removed), got=len(ems))
        for truth, em in zip(removed, ems):
            p = em.mean_plume if isinstance(em, EmulatedPlume) else em
            if p.origin != truth.origin or p.time != truth.time:
                raise ValueError(f"{name}: emulation for {p.origin}, {p.time} is misaligned "
                                 f"with plume at {truth.origin}, {truth.time}")
    rows = []
    for j, truth in enumerate(removed):
        row = {"plume_index": indices[j], "site_lon": truth.origin[0], "site_lat": truth.origin[1],
               "time": truth.time}
        for m in METHODS:
            if m in emulations:
                em = emulations[m][j]
                row[f"mse_{m}"] = mse(truth, em.mean_plume if isinstance(em, EmulatedPlume) else em)
            else:
                row[f"mse_{m}"] = float("nan")
        rows.append(row)
    return MetricsTable(rows)


def nearest_copy_baseline(kept: PlumeSet, removed: PlumeSet) -> list[Plume]:
    """For each removed plume, the kept plume from the same site closest in time."""
    out = []
    for p in removed:
        same = [k for k in kept if k.origin == p.origin]
        if not same:
            raise ValueError(f"no kept plume at site {p.origin}")
        best = min(same, key=lambda k: (abs(k.time - p.time), k.time))
        out.append(best)
    return out


# plotting ------------------------------------------------------------------------

def _write_pgm(path: Path, values: np.ndarray, decades: float = 6.0) -> None:
    """8-bit binary graymap of log10 values; ``decades`` below the maximum map to black."""
    v = np.asarray(values, dtype=float)
    img = np.zeros(v.shape, dtype=np.uint8)
    pos = v > 0
    if pos.any():
        top = np.log10(v[pos].max())
        lo = top - decades
        scaled = (np.log10(np.where(pos, v, 1.0)) - lo) / decades
        img = np.where(pos, np.clip(np.round(scaled * 255), 0, 255), 0).astype(np.uint8)
    img = img[::-1]  # north up
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _write_value_csv(path: Path, p: Plume) -> None:
    lon, lat = p.grid.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "value"])
        for x, y, v in zip(lon.ravel(), lat.ravel(), p.vector):
            w.writerow([f"{x:.10g}", f"{y:.10g}", f"{v:.10g}"])


def plot(item, path: str | os.PathLike) -> list[Path]:
    """Write ``path.pgm`` and ``path.csv`` (mean and stderr files for an emulation)."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    parts = [("", item)] if isinstance(item, Plume) else \
        [("_mean", item.mean_plume), ("_stderr", item.stderr_plume)]
    written = []
    for suffix, p in parts:
        stem = base.with_name(base.name + suffix)
        _write_pgm(stem.with_suffix(".pgm"), p.values)
        _write_value_csv(stem.with_suffix(".csv"), p)
        written += [stem.with_suffix(".pgm"), stem.with_suffix(".csv")]
    return written


# configuration -----------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    run_id: str = "run"
    n_sites: int = 5
    n_times: int = 80
    days: float = 30.0
    grid_side: int = 64
    d_lon: float = 0.352
    d_lat: float = 0.234
    annulus_inner: float = 0.5
    annulus_outer: float = 1.5
    idw_power: float = 2.0
    idw_k: int = 4
    target_res: int = 64
    eof_r: int = 8
    cvae_r: int = 8
    epochs: int = 100
    restarts: int = 3
    batch_size: int = 16
    lam: float = 1e-9
    learning_rate: float = 1e-3
    draws: int = 1
    enc_channels: str = "8,16,32,32,64,64"
    dec_channels: str = "64,32,32,16,8,1"
    gp_restarts: int = 5
    jitter: float | None = None
    n_samples: int = 100
    methods: str = "eof,cvae"

    SECTIONS = {
        "experiment": ("seed", "out_dir", "run_id", "n_sites", "n_times", "days", "grid_side",
                       "d_lon", "d_lat", "methods"),
        "preprocess": ("annulus_inner", "annulus_outer", "idw_power", "idw_k", "target_res"),
        "eof": ("eof_r",),
        "cvae": ("cvae_r", "epochs", "restarts", "batch_size", "lam", "learning_rate", "draws",
                 "enc_channels", "dec_channels"),
        "gp": ("gp_restarts", "jitter"),
        "emulate": ("n_samples",),
    }

    def __post_init__(self):
        for name in ("n_sites", "n_times", "grid_side", "idw_k", "target_res", "eof_r", "cvae_r",
                     "restarts", "batch_size", "draws", "gp_restarts", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.days <= 0 or self.d_lon <= 0 or self.d_lat <= 0:
            raise ConfigError("epochs must be >= 0; days and spacings positive")
        if not 0 < self.annulus_inner < self.annulus_outer:
            raise ConfigError("need 0 < annulus_inner < annulus_outer")
        try:
            self.arch
        except ValueError as exc:
            raise ConfigError(f"bad CVAE layer table: {exc}") from exc
        bad = set(self.method_list) - set(METHODS)
        if bad or not self.method_list:
            raise ConfigError(f"unknown methods {sorted(bad)}")

    @property
    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    @property
    def arch(self) -> cv.ArchSpec:
        return cv.ArchSpec(self.target_res, self.cvae_r,
                           tuple(int(c) for c in self.enc_channels.split(",")),
                           tuple(int(c) for c in self.dec_channels.split(",")))

    @property
    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(self.annulus_inner, self.annulus_outer, 2.0, self.idw_power,
                                self.idw_k, self.target_res)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for section, names in self.SECTIONS.items():
            cp[section] = {n: "" if getattr(self, n) is None else str(getattr(self, n))
                           for n in names}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    def updated(self, **overrides) -> "ExperimentConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown settings {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _coerce(name: str, text: str):
    typ = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    text = text.strip()
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "float | None":
            return None if text in ("", "none", "None") else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r}") from exc


def load_config(path: str | os.PathLike | None = None, **overrides) -> ExperimentConfig:
    """Read ``key = value`` lines grouped in sections, then apply overrides."""
    values = {}
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            if not cp.read(path):
                raise ConfigError(f"cannot read config file {path}")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        owner = {n: s for s, names in ExperimentConfig.SECTIONS.items() for n in names}
        for section in cp.sections():
            if section not in ExperimentConfig.SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, text in cp[section].items():
                if owner.get(key) != section:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig().updated(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# the experiment -----------------------------------------------------------------------

def experiment_grid(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec(cfg.grid_side, cfg.grid_side, 0.0, 0.0, cfg.d_lon, cfg.d_lat)


def experiment_sites(cfg: ExperimentConfig) -> list[tuple[float, float]]:
    """Release sites drawn uniformly from the central half of the grid."""
    g = experiment_grid(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    w, h = g.n_lon * g.d_lon, g.n_lat * g.d_lat
    lons = g.lon_min + w * rng.uniform(0.25, 0.75, cfg.n_sites)
    lats = g.lat_min + h * rng.uniform(0.25, 0.75, cfg.n_sites)
    return [(round(float(a), 6), round(float(b), 6)) for a, b in zip(lons, lats)]


def experiment_dataset(cfg: ExperimentConfig) -> PlumeSet:
    step = int(round(cfg.days * 86400 / cfg.n_times))
    times = [k * step for k in range(cfg.n_times)]
    wind = WindField(seed=cfg.seed)
    return generate_site_series(experiment_sites(cfg), times, wind, experiment_grid(cfg),
                                PuffConfig())


def train_reducer(kind: str, canonical: PlumeSet, cfg: ExperimentConfig) -> Reducer:
    if kind == "eof":
        return Reducer("eof", eof=eo.fit_eof(canonical, cfg.eof_r))
    arch = cfg.arch
    tc = cv.TrainConfig(cfg.epochs, cfg.restarts, cfg.batch_size, cfg.draws, cfg.lam, cfg.seed,
                        cfg.learning_rate)
    model, _ = cv.train(canonical, tc, arch)
    return Reducer("cvae", cvae=model)


def query_seed(seed: int, method: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, METHODS.index(method), index])


def run_experiment(cfg: ExperimentConfig, plumes: PlumeSet | None = None) -> dict:
    """Generate (or take) plumes, hold out every second one, emulate it with each method.

    Writes ``config.txt``, ``metrics.csv``, ``summary.csv``, ``models/`` and
    ``plots/`` under ``cfg.run_dir`` and returns a summary dictionary.
    """
    t0 = _time.perf_counter()
    out = cfg.run_dir
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    plumes = plumes if plumes is not None else experiment_dataset(cfg)
    write_plumeset(out / "plumes.plumeset", plumes)
    kept, removed, kept_idx, removed_idx = holdout_split(plumes)
    prepared = prepare(kept, cfg.preprocess)
    canon = prepared[0]
    emulations: dict[str, list[EmulatedPlume]] = {}
    timings = {}
    for method in cfg.method_list:
        t = _time.perf_counter()
        reducer = train_reducer(method, canon, cfg)
        rpath = "eof.basis" if method == "eof" else "cvae.ckpt"
        reducer.save(out / "models" / rpath)
        bundle = build_bundle(kept, reducer, cfg.preprocess, cfg.seed, cfg.jitter,
                              cfg.gp_restarts, prepared)
        bundle.save(out / "models" / f"bundle_{method}.json", rpath)
        emulations[method] = [emulate(bundle, p.origin, p.time, cfg.n_samples,
                                      query_seed(cfg.seed, method, j))
                              for j, p in enumerate(removed)]
        timings[method] = _time.perf_counter() - t
        log.info("%s: trained and emulated in %.1f s", method, timings[method])
    table = evaluate(removed, emulations, removed_idx)
    table.write_csv(out / "metrics.csv")
    baseline = nearest_copy_baseline(kept, removed)
    sums = {m: table.sum_mse(m) for m in cfg.method_list}
    sums["nearest_copy"] = float(sum(mse(a, b) for a, b in zip(removed, baseline)))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "sum_mse"])
        for k, v in sums.items():
            w.writerow([k, repr(v)])
    if len(removed):
        plot(removed[0], out / "plots" / "truth_0")
        for m, ems in emulations.items():
            plot(ems[0], out / "plots" / f"{m}_0")
    min_value = min((float(min(e.mean_plume.values.min(), e.stderr_plume.values.min()))
                     for ems in emulations.values() for e in ems), default=0.0)
    return {"sum_mse": sums, "n_kept": len(kept), "n_removed": len(removed),
            "n_gp_points": len(prepared[2]), "min_output_value": min_value,
            "seconds": _time.perf_counter() - t0, "method_seconds": timings,
            "run_dir": str(out)}
