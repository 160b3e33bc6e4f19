import warnings

import numpy as np
import pytest

from odorloc.datagen import (N_FEATURES, N_READINGS, DegenerateSplitWarning, Normalizer,
                             build_dataset, dataset_config, load_dataset, observe, save_dataset,
                             split, trace_features, uniform_times)
from odorloc.grid_pde import make_config, simulate


@pytest.fixture(scope="module")
def tiny_ds():
    cfg = dataset_config(grid=(20, 20))
    return build_dataset(40, cfg=cfg, seed=7)


def test_zero_noise_trace_is_clean(small_cfg):
    cfg = small_cfg.replace(noise_sigma_frac=0.0)
    tr = observe(cfg, [(3e-6, 4e-6)], [0.05, 0.1, 0.2], seed=1)
    assert np.array_equal(tr.readings, tr.clean)
    assert tr.noise_sigma == 0.0


def test_noise_rule_uses_field_max(small_cfg):
    times = np.linspace(0.002, 0.2, 100)
    tr = observe(small_cfg, [(3e-6, 4e-6)] * 100, times, seed=0)
    fmax = simulate(small_cfg).field_max
    assert tr.noise_sigma == pytest.approx(0.1 * fmax)
    resid = (tr.readings - tr.clean).ravel()
    assert resid.size == 10_000
    assert resid.std() == pytest.approx(0.1 * fmax, rel=0.05)
    # zero mean within three standard errors
    assert abs(resid.mean()) < 3 * tr.noise_sigma / np.sqrt(resid.size)


def test_sensor_on_a_cell_center_reads_the_grid_value(small_cfg):
    cfg = small_cfg.replace(noise_sigma_frac=0.0)
    xs, ys = cfg.cell_centers()
    tr = observe(cfg, [(xs[10], ys[10])], [cfg.total_time])
    assert tr.readings[0, 0] == pytest.approx(simulate(cfg).final.values[10, 10], rel=1e-12)


def test_observe_rejects_bad_inputs(small_cfg):
    with pytest.raises(ValueError):
        observe(small_cfg, [(2e-5, 1e-6)], [0.1])
    with pytest.raises(ValueError):
        observe(small_cfg, [(2e-6, 1e-6)], [5.0])


def test_uniform_times():
    t = uniform_times(1.0)
    assert len(t) == N_READINGS
    assert t[-1] == 1.0
    assert np.all(np.diff(t) > 0)


def test_dataset_shapes_and_labels(tiny_ds):
    assert tiny_ds.features.shape == (40, N_FEATURES)
    np.testing.assert_array_equal(tiny_ds.labels, tiny_ds.sources - tiny_ds.sensors)
    lo, hi = 1e-6, 9e-6
    assert tiny_ds.sources.min() >= lo and tiny_ds.sources.max() <= hi
    ux = tiny_ds.features[:, -2]
    assert ux.min() >= 0 and ux.max() <= 1e-6
    assert not tiny_ds.features[:, -1].any()


def test_dataset_is_deterministic(tiny_ds):
    again = build_dataset(40, cfg=dataset_config(grid=(20, 20)), seed=7)
    assert np.array_equal(again.features, tiny_ds.features)
    assert np.array_equal(again.labels, tiny_ds.labels)
    other = build_dataset(40, cfg=dataset_config(grid=(20, 20)), seed=8)
    assert not np.array_equal(other.labels, tiny_ds.labels)


def test_samples_do_not_depend_on_dataset_size():
    cfg = dataset_config(grid=(20, 20))
    a = build_dataset(5, cfg=cfg, seed=3)
    b = build_dataset(9, cfg=cfg, seed=3)
    np.testing.assert_allclose(a.features, b.features[:5], rtol=1e-12)


def test_bank_and_direct_generation_agree():
    cfg = dataset_config(grid=(16, 16))
    a = build_dataset(4, cfg=cfg, seed=11, method="bank")
    b = build_dataset(4, cfg=cfg, seed=11, method="direct")
    np.testing.assert_allclose(a.features, b.features, rtol=1e-9,
                               atol=1e-9 * np.abs(b.features[:, :N_READINGS]).max())


def test_source_at_sensor_has_zero_label():
    cfg = dataset_config(grid=(20, 20))
    ds = build_dataset(2, sensor_pos=(4e-6, 6e-6), source_sampler=lambda rng: (4e-6, 6e-6),
                       cfg=cfg)
    assert not ds.labels.any()


def test_split_sizes_and_partition():
    cfg = dataset_config(grid=(10, 10))
    ds = build_dataset(4000, cfg=cfg, seed=0)
    train, test = split(ds, 0.8, seed=5)
    assert (len(train), len(test)) == (3200, 800)
    keys = lambda d: {tuple(r) for r in d.sources}
    assert keys(train).isdisjoint(keys(test))
    assert len(keys(train) | keys(test)) == 4000
    again = split(ds, 0.8, seed=5)
    assert np.array_equal(again[0].labels, train.labels)


def test_split_degenerate_single_sample(tiny_ds):
    with pytest.warns(DegenerateSplitWarning):
        train, test = split(tiny_ds.subset([0]), 0.8)
    assert (len(train), len(test)) == (1, 0)


def test_split_rejects_bad_fraction(tiny_ds):
    with pytest.raises(ValueError):
        split(tiny_ds, 1.0)


def test_normalizer_roundtrip(tiny_ds):
    norm = Normalizer.fit(tiny_ds)
    x = tiny_ds.features
    np.testing.assert_allclose(norm.features_inverse(norm.features(x)), x, rtol=1e-12)
    y = tiny_ds.labels
    np.testing.assert_allclose(norm.labels_inverse(norm.labels(y)), y, rtol=1e-12)
    assert np.abs(norm.features(x)[:, :N_READINGS]).max() == pytest.approx(1.0)


def test_trace_features_downsampling():
    cfg = dataset_config(grid=(16, 16))
    tr = observe(cfg, [(2e-6, 3e-6)], uniform_times(cfg.total_time, 1199), seed=0)
    f = trace_features(tr)
    assert f.shape == (N_FEATURES,)
    assert f[0] == tr.readings[0, 0] and f[N_READINGS - 1] == tr.readings[-1, 0]
    assert tuple(f[-2:]) == cfg.flow
    short = observe(cfg, [(2e-6, 3e-6)], uniform_times(cfg.total_time, 100), seed=0)
    with pytest.raises(ValueError):
        trace_features(short)


def test_dataset_csv_roundtrip(tmp_path, tiny_ds):
    save_dataset(tiny_ds, tmp_path / "d.csv")
    ds, norm = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(ds.features, tiny_ds.features)
    assert np.array_equal(ds.labels, tiny_ds.labels)
    assert norm == Normalizer.fit(tiny_ds)
    assert ds.meta["master_seed"] == 7
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert len(header) == N_FEATURES + 2 + 5
