import csv
import math

import numpy as np
import pytest

from plumemu import cvae as cv
from plumemu import pipeline as pl
from plumemu.eof import fit_eof
from plumemu.errors import ConfigError, DimensionError
from plumemu.plume import GridSpec, Plume, PlumeSet, mse, read_plumeset, write_plumeset

TINY = dict(grid_side=32, target_res=32, n_sites=3, n_times=10, days=4.0, eof_r=3, cvae_r=2,
            epochs=2, restarts=1, batch_size=8, enc_channels="4,8", dec_channels="8,1",
            gp_restarts=1, n_samples=4)


@pytest.fixture(scope="module")
def tiny_cfg():
    return pl.load_config(None, **TINY)


@pytest.fixture(scope="module")
def tiny_data(tiny_cfg):
    plumes = pl.experiment_dataset(tiny_cfg)
    kept, removed, ki, ri = pl.holdout_split(plumes)
    prepared = pl.prepare(kept, tiny_cfg.preprocess)
    return plumes, kept, removed, prepared


@pytest.fixture(scope="module")
def eof_bundle(tiny_cfg, tiny_data):
    _, kept, _, prepared = tiny_data
    reducer = pl.Reducer("eof", eof=fit_eof(prepared[0], 3))
    return pl.build_bundle(kept, reducer, tiny_cfg.preprocess, seed=1, restarts=1,
                           prepared=prepared)


def toy_set(n=4):
    g = GridSpec(2, 2, 0, 0, 1, 1)
    sites = [(0.5, 0.5), (1.5, 1.5)]
    plumes = [Plume(g, np.full(4, float(i)), sites[i % 2], (i // 2) * 3600) for i in range(n)]
    return PlumeSet(g, tuple(plumes[::-1]))


def test_holdout_split_alternates():
    ps = toy_set(4)
    kept, removed, ki, ri = pl.holdout_split(ps)
    assert len(kept) == 2 and len(removed) == 2
    assert [p.values[0, 0] for p in kept] == [0.0, 2.0]
    assert [p.values[0, 0] for p in removed] == [1.0, 3.0]
    assert sorted(ki + ri) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        pl.holdout_split(ps.subset([0]))


def test_holdout_split_stable_under_reload(tmp_path):
    ps = toy_set(6)
    write_plumeset(tmp_path / "p.plumeset", ps)
    again = read_plumeset(tmp_path / "p.plumeset")
    assert pl.holdout_split(ps)[2] == pl.holdout_split(again)[2]


def test_bundle_shape_and_targets(eof_bundle, tiny_data):
    _, kept, _, prepared = tiny_data
    assert len(eof_bundle.models) == 3 + 2
    norms = np.hypot(eof_bundle.angle_targets[:, 0], eof_bundle.angle_targets[:, 1])
    np.testing.assert_allclose(norms, 1.0, rtol=1e-12)
    feats = eof_bundle.reducer.features(prepared[0].images())
    assert np.array_equal(feats, eof_bundle.feature_targets)
    for j, m in enumerate(eof_bundle.models[:3]):
        assert np.array_equal(m.train_targets, eof_bundle.feature_targets[:, j])


def test_bundle_gp_count_for_r20(tiny_cfg):
    cfg = tiny_cfg.updated(n_times=14)
    kept = pl.holdout_split(pl.experiment_dataset(cfg))[0]
    prepared = pl.prepare(kept, cfg.preprocess)
    reducer = pl.Reducer("eof", eof=fit_eof(prepared[0], 20))
    bundle = pl.build_bundle(kept, reducer, cfg.preprocess, restarts=1, prepared=prepared)
    assert len(bundle.models) == 22
    g = bundle.output_grid
    with pytest.raises(DimensionError):
        pl.EmulationBundle(reducer, bundle.models[:21], cfg.preprocess, g, g,
                           bundle.feature_targets, bundle.angle_targets)


def test_cvae_bundle_targets_equal_encoder_means(tiny_cfg, tiny_data):
    _, kept, _, prepared = tiny_data
    model = cv.init_model(tiny_cfg.arch, np.random.default_rng(3))
    bundle = pl.build_bundle(kept, pl.Reducer("cvae", cvae=model), tiny_cfg.preprocess,
                             restarts=1, prepared=prepared)
    means, _ = cv.encode_batch(model, prepared[0].images())
    assert np.array_equal(bundle.feature_targets, means)
    assert len(bundle.models) == 2 + 2


def test_single_sample_has_zero_stderr(eof_bundle, tiny_data):
    _, _, removed, _ = tiny_data
    p = removed[0]
    em = pl.emulate(eof_bundle, p.origin, p.time, n_samples=1, seed=0)
    assert np.all(em.stderr_plume.values == 0)
    assert em.mean_plume.grid == p.grid


def test_emulation_nonnegative_and_seeded(eof_bundle, tiny_data):
    _, _, removed, _ = tiny_data
    p = removed[1]
    a = pl.emulate(eof_bundle, p.origin, p.time, n_samples=20, seed=5)
    b = pl.emulate(eof_bundle, p.origin, p.time, n_samples=20, seed=5)
    assert np.all(a.mean_plume.values >= 0) and np.all(a.stderr_plume.values >= 0)
    assert np.array_equal(a.mean_plume.values, b.mean_plume.values)
    # far-field cells where every sample is zero carry no spread
    zero = a.mean_plume.values == 0
    assert np.all(a.stderr_plume.values[zero] == 0)


def test_query_at_kept_plume_reproduces_reconstruction(tiny_cfg, tiny_data):
    _, kept, _, prepared = tiny_data
    reducer = pl.Reducer("eof", eof=fit_eof(prepared[0], 3))
    bundle = pl.build_bundle(kept, reducer, tiny_cfg.preprocess, restarts=1, jitter=0.0,
                             prepared=prepared)
    idx = prepared[2]
    for i in (0, 3):
        truth = kept[idx[i]]
        em = pl.emulate(bundle, truth.origin, truth.time, n_samples=10, seed=2)
        ref = pl.reconstruct_kept(bundle, i, truth.origin, truth.time)
        assert mse(em.mean_plume, truth) <= 1.5 * mse(ref, truth)
        assert mse(em.mean_plume, ref) <= 1e-6 * max(np.mean(ref.values ** 2), 1e-300)


def test_evaluate_identity_and_sums(tiny_data, tmp_path):
    _, kept, removed, _ = tiny_data
    perfect = [pl.EmulatedPlume(p, p.with_values(np.zeros(p.grid.shape)), 1) for p in removed]
    table = pl.evaluate(removed, {"eof": perfect, "cvae": list(removed)})
    assert table.sum_mse("eof") == 0 and table.sum_mse("cvae") == 0
    copies = pl.nearest_copy_baseline(kept, removed)
    table = pl.evaluate(removed, {"eof": [pl.EmulatedPlume(c.with_values(c.values, origin=p.origin,
                                                                         time=p.time),
                                                           c, 1) for c, p in zip(copies, removed)]})
    per = [row["mse_eof"] for row in table.rows]
    assert table.sum_mse("eof") == pytest.approx(sum(per), rel=1e-15)
    assert all(math.isnan(row["mse_cvae"]) for row in table.rows)
    table.write_csv(tmp_path / "metrics.csv")
    back = pl.MetricsTable.read_csv(tmp_path / "metrics.csv")
    assert [r["mse_eof"] for r in back.rows] == per
    assert [r["plume_index"] for r in back.rows] == [r["plume_index"] for r in table.rows]
    with open(tmp_path / "metrics.csv") as fh:
        assert next(csv.reader(fh)) == pl.METRICS_HEADER
    with pytest.raises(ValueError):
        pl.evaluate(removed, {"eof": list(reversed(removed))})
    with pytest.raises(DimensionError):
        pl.evaluate(removed, {"eof": list(removed)[:-1]})


def test_nearest_copy_baseline_same_site_nearest_time():
    g = GridSpec(2, 2, 0, 0, 1, 1)
    kept = PlumeSet(g, (Plume(g, np.zeros(4), (0.5, 0.5), 0), Plume(g, np.ones(4), (0.5, 0.5), 7200),
                        Plume(g, np.ones(4), (1.5, 0.5), 3600)))
    removed = PlumeSet(g, (Plume(g, np.zeros(4), (0.5, 0.5), 3000),))
    assert pl.nearest_copy_baseline(kept, removed)[0].time == 0


def test_plot_outputs(tmp_path):
    g = GridSpec(3, 2, 10.0, 20.0, 0.5, 0.25)
    files = pl.plot(Plume(g, np.full(6, 0.37)), tmp_path / "c")
    data = (tmp_path / "c.pgm").read_bytes()
    assert data.startswith(b"P5\n3 2\n255\n")
    assert len(set(data[len(b"P5\n3 2\n255\n"):])) == 1
    values = np.random.default_rng(1).random(6) * 1e-3
    pl.plot(Plume(g, values), tmp_path / "r")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == g.size
    np.testing.assert_allclose([float(r["value"]) for r in rows], values, rtol=1e-6)
    lon, lat = g.centers()
    np.testing.assert_allclose([float(r["lon"]) for r in rows], lon.ravel())
    em = pl.EmulatedPlume(Plume(g, values), Plume(g, values / 2), 3)
    names = sorted(p.name for p in pl.plot(em, tmp_path / "e"))
    assert names == ["e_mean.csv", "e_mean.pgm", "e_stderr.csv", "e_stderr.pgm"]
    assert len(files) == 2


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[experiment]\nseed = 4\nn_sites = 2\n\n[cvae]\nepochs = 7\n\n[gp]\njitter = 1e-9\n")
    cfg = pl.load_config(path, n_sites=3)
    assert cfg.seed == 4 and cfg.n_sites == 3 and cfg.epochs == 7 and cfg.jitter == 1e-9
    echo = tmp_path / "echo.cfg"
    echo.write_text(cfg.to_text())
    assert pl.load_config(echo) == cfg
    path.write_text("[cvae]\nnot_a_key = 1\n")
    with pytest.raises(ConfigError):
        pl.load_config(path)
    path.write_text("[cvae]\nepochs = many\n")
    with pytest.raises(ConfigError):
        pl.load_config(path)
    with pytest.raises(ConfigError):
        pl.load_config(None, methods="pca")
    with pytest.raises(ConfigError):
        pl.load_config(None, target_res=48)


def test_bundle_save_load(eof_bundle, tiny_data, tmp_path):
    eof_bundle.reducer.save(tmp_path / "eof.basis")
    eof_bundle.save(tmp_path / "bundle.json", "eof.basis")
    back = pl.EmulationBundle.load(tmp_path / "bundle.json")
    p = tiny_data[2][0]
    a = pl.emulate(eof_bundle, p.origin, p.time, 5, seed=1)
    b = pl.emulate(back, p.origin, p.time, 5, seed=1)
    assert np.array_equal(a.mean_plume.values, b.mean_plume.values)


def test_tiny_experiment_deterministic(tiny_cfg, tmp_path):
    r1 = pl.run_experiment(tiny_cfg.updated(out_dir=str(tmp_path), run_id="a"))
    r2 = pl.run_experiment(tiny_cfg.updated(out_dir=str(tmp_path), run_id="b"))
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    table = pl.MetricsTable.read_csv(tmp_path / "a" / "metrics.csv")
    assert len(table.rows) == r1["n_removed"] == 15
    assert all(np.isfinite(row["mse_eof"]) and np.isfinite(row["mse_cvae"]) for row in table.rows)
    assert r1["min_output_value"] >= 0 and r1["sum_mse"] == r2["sum_mse"]
    for name in ("config.txt", "summary.csv", "models/eof.basis", "models/cvae.ckpt",
                 "models/bundle_eof.json", "models/bundle_cvae.json", "plots/truth_0.pgm"):
        assert (tmp_path / "a" / name).exists(), name
