"""Command-line entry point: ``plumemu <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import cvae as cv
from . import eof as eo
from . import pipeline as pl
from .errors import ConfigError, NumericalError
from .plume import PlumeSet, read_plumeset, write_plumeset
from .preprocess import weak_signal_filter

log = logging.getLogger("plumemu")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file with sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help="root for run directories")
    p.add_argument("--run-id", help="run directory name under --out-dir")
    p.add_argument("--reducer", choices=pl.METHODS)
    p.add_argument("--r", type=int, help="latent dimension for the chosen reducer")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--jitter", type=float, help="relative jitter to try first in GP factorisations")
    p.add_argument("--annulus-inner", type=float)
    p.add_argument("--annulus-outer", type=float)
    p.add_argument("--idw-power", type=float)
    p.add_argument("--idw-k", type=int)
    p.add_argument("--target-res", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    parser = argparse.ArgumentParser(prog="plumemu",
                                     description="Plume dimension reduction and GP emulation")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[shared], help="generate a synthetic site-series dataset")
    s.add_argument("--output", help="PLUMESET1 file (default: run dir/plumes.plumeset)")

    s = sub.add_parser("preprocess", parents=[shared], help="canonicalise plumes")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--holdout", action="store_true", help="keep only the even hold-out half")
    s.add_argument("--filter", action="store_true", help="apply the weak-signal filter first")

    s = sub.add_parser("fit-eof", parents=[shared], help="fit an EOF basis to canonical plumes")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("train-cvae", parents=[shared], help="train the CVAE on canonical plumes")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("build-bundle", parents=[shared], help="fit GP emulators for a reducer")
    s.add_argument("--input", required=True, help="full plume set; the kept half is used")
    s.add_argument("--model", required=True, help="EOFBASIS1 or CVAE1 file")
    s.add_argument("--output", required=True)

    s = sub.add_parser("emulate", parents=[shared], help="emulate one plume")
    s.add_argument("--bundle", required=True)
    s.add_argument("--site", required=True, help="lon,lat")
    s.add_argument("--time", required=True, type=int, help="release time, seconds")
    s.add_argument("--output", required=True, help="PLUMESET1 file holding mean then stderr")

    s = sub.add_parser("evaluate", parents=[shared],
                       help="emulate the removed half and write metrics.csv")
    s.add_argument("--input", required=True)
    s.add_argument("--bundle-eof")
    s.add_argument("--bundle-cvae")

    s = sub.add_parser("plot", parents=[shared], help="graymap and CSV of a plume")
    s.add_argument("--input", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--output", required=True, help="path prefix")

    sub.add_parser("experiment", parents=[shared], help="run the full hold-out experiment")
    return parser


def _config(args) -> pl.ExperimentConfig:
    over = {"seed": args.seed, "out_dir": args.out_dir, "run_id": args.run_id,
            "n_samples": args.n_samples, "jitter": args.jitter,
            "annulus_inner": args.annulus_inner, "annulus_outer": args.annulus_outer,
            "idw_power": args.idw_power, "idw_k": args.idw_k, "target_res": args.target_res,
            "epochs": args.epochs, "restarts": args.restarts, "batch_size": args.batch_size}
    if args.r is not None:
        kinds = [args.reducer] if args.reducer else list(pl.METHODS)
        for k in kinds:
            over[f"{k}_r"] = args.r
    if args.reducer:
        over["methods"] = args.reducer
    return pl.load_config(args.config, **over)


def _echo(cfg: pl.ExperimentConfig) -> Path:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.txt").write_text(cfg.to_text())
    return cfg.run_dir


def _site(text: str) -> tuple[float, float]:
    try:
        lon, lat = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--site expects lon,lat, got {text!r}") from exc
    return lon, lat


def cmd_synth(args, cfg):
    out = Path(args.output) if args.output else _echo(cfg) / "plumes.plumeset"
    out.parent.mkdir(parents=True, exist_ok=True)
    ps = pl.experiment_dataset(cfg)
    write_plumeset(out, ps)
    print(f"wrote {len(ps)} plumes to {out}")


def cmd_preprocess(args, cfg):
    ps = read_plumeset(args.input)
    if args.filter:
        ps = weak_signal_filter(ps)
    if args.holdout:
        ps = pl.holdout_split(ps)[0]
    canon, angles, idx = pl.prepare(ps, cfg.preprocess)
    write_plumeset(args.output, canon)
    side = Path(str(args.output) + ".angles.csv")
    with open(side, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "site_lon", "site_lat", "time", "angle"])
        for j, a in zip(idx, angles):
            p = ps[j]
            w.writerow([j, repr(p.origin[0]), repr(p.origin[1]), p.time, repr(a.angle)])
    print(f"canonicalised {len(canon)} of {len(ps)} plumes -> {args.output}")


def cmd_fit_eof(args, cfg):
    basis = eo.fit_eof(read_plumeset(args.input), cfg.eof_r)
    eo.save_basis(args.output, basis)
    print(f"EOF basis r={basis.r} -> {args.output}")


def cmd_train_cvae(args, cfg):
    ps = read_plumeset(args.input)
    tc = cv.TrainConfig(cfg.epochs, cfg.restarts, cfg.batch_size, cfg.draws, cfg.lam, cfg.seed,
                        cfg.learning_rate)
    model, hist = cv.train(ps, tc, cfg.arch)
    cv.save_model(args.output, model)
    print(f"CVAE r={model.r}, restart {hist.chosen} chosen "
          f"(training mse {hist.final_train_mse[hist.chosen]:.6g}) -> {args.output}")


def _kind_of(path: str, given: str | None) -> str:
    with open(path, "rb") as fh:
        head = fh.read(9)
    kind = "eof" if head.startswith(eo.MAGIC) else "cvae" if head.startswith(cv.MAGIC) else None
    if kind is None:
        raise ConfigError(f"{path}: neither an EOF basis nor a CVAE checkpoint")
    if given and given != kind:
        raise ConfigError(f"--reducer {given} but {path} holds a {kind} model")
    return kind


def cmd_build_bundle(args, cfg):
    kind = _kind_of(args.model, args.reducer)
    reducer = pl.Reducer.load(kind, args.model)
    kept = pl.holdout_split(read_plumeset(args.input))[0]
    bundle = pl.build_bundle(kept, reducer, cfg.preprocess, cfg.seed, cfg.jitter, cfg.gp_restarts)
    out = Path(args.output)
    rel = Path(args.model).resolve()
    bundle.save(out, str(rel))
    print(f"{len(bundle.models)} GP emulators ({kind}) -> {out}")


def cmd_emulate(args, cfg):
    site = _site(args.site)
    bundle = pl.EmulationBundle.load(args.bundle)
    em = pl.emulate(bundle, site, args.time, cfg.n_samples, cfg.seed)
    write_plumeset(args.output, PlumeSet(em.mean_plume.grid, (em.mean_plume, em.stderr_plume)))
    print(f"emulated mean and stderr ({em.n_samples} samples) -> {args.output}")


def cmd_evaluate(args, cfg):
    ps = read_plumeset(args.input)
    kept, removed, _, removed_idx = pl.holdout_split(ps)
    bundles = {m: pl.EmulationBundle.load(p) for m, p in
               (("eof", args.bundle_eof), ("cvae", args.bundle_cvae)) if p}
    if not bundles:
        raise ConfigError("evaluate needs --bundle-eof and/or --bundle-cvae")
    ems = {m: [pl.emulate(b, p.origin, p.time, cfg.n_samples, pl.query_seed(cfg.seed, m, j))
               for j, p in enumerate(removed)] for m, b in bundles.items()}
    table = pl.evaluate(removed, ems, removed_idx)
    out = _echo(cfg)
    table.write_csv(out / "metrics.csv")
    base = pl.nearest_copy_baseline(kept, removed)
    base_sum = float(sum(pl.mse(a, b) for a, b in zip(removed, base)))
    for m in bundles:
        print(f"{m}: sumMSE {table.sum_mse(m):.6g}")
    print(f"nearest copy: sumMSE {base_sum:.6g}")
    print(f"metrics -> {out / 'metrics.csv'}")


def cmd_plot(args, cfg):
    ps = read_plumeset(args.input)
    files = pl.plot(ps[args.index], args.output)
    print("wrote " + ", ".join(str(f) for f in files))


def cmd_experiment(args, cfg):
    res = pl.run_experiment(cfg)
    for k, v in res["sum_mse"].items():
        print(f"{k}: sumMSE {v:.6g}")
    print(f"results in {res['run_dir']} ({res['seconds']:.0f} s)")


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "fit-eof": cmd_fit_eof,
            "train-cvae": cmd_train_cvae, "build-bundle": cmd_build_bundle,
            "emulate": cmd_emulate, "evaluate": cmd_evaluate, "plot": cmd_plot,
            "experiment": cmd_experiment}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
