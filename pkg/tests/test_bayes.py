import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odorloc import bayes
from odorloc.datagen import SensorTrace, dataset_config, observe, uniform_times
from odorloc.grid_pde import forward_concentration, make_config


@pytest.fixture(scope="module")
def cfg():
    return make_config(grid=(20, 20), total_time=0.2, injection_duration=0.1,
                       source_pos=(6.25e-6, 3.75e-6))


@pytest.fixture(scope="module")
def trace(cfg):
    return observe(cfg, [(3.0e-6, 5.0e-6), (7.0e-6, 6.0e-6)], uniform_times(cfg.total_time, 40), seed=1)


@pytest.fixture(scope="module")
def clean(trace):
    return SensorTrace(trace.sensors, trace.times, trace.clean, trace.clean, trace.noise_sigma,
                       None, trace.config)


def test_log_likelihood_matches_grid_evaluation(cfg, trace):
    xs, ys, ll = bayes.grid_log_likelihood(trace)
    for i, j in [(0, 0), (12, 7), (19, 3)]:
        assert bayes.log_likelihood((xs[i], ys[j]), trace) == pytest.approx(ll[i, j], rel=1e-9)


def test_log_likelihood_rejects_bad_sigma(trace):
    with pytest.raises(ValueError):
        bayes.log_likelihood((5e-6, 5e-6), trace, sigma=0.0)
    with pytest.raises(ValueError):
        bayes.map_estimate(trace, sigma=-1.0)


def test_zero_residual_reading(cfg):
    cand = (4e-6, 6e-6)
    t = np.array([0.1])
    z = forward_concentration(cand, [(5e-6, 5e-6)], cfg, t)
    tr = SensorTrace([(5e-6, 5e-6)], t, z, z, 1.0, None, cfg)
    assert bayes.log_likelihood(cand, tr) == 0.0


def test_doubling_sigma_quarters_differences(trace):
    _, _, a = bayes.grid_log_likelihood(trace, sigma=trace.noise_sigma)
    _, _, b = bayes.grid_log_likelihood(trace, sigma=2 * trace.noise_sigma)
    np.testing.assert_allclose(b - b[0, 0], (a - a[0, 0]) / 4, rtol=1e-12, atol=1e-9)


def test_posterior_is_normalized(trace):
    _, post = bayes.map_estimate(trace)
    assert post.prob.sum() == pytest.approx(1.0, abs=1e-9)
    _, coarse = bayes.map_estimate(trace, nc=7)
    assert coarse.prob.shape == (7, 7) and coarse.prob.sum() == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_argmax_invariant_to_constant_shift(shift):
    ll = np.random.default_rng(0).normal(size=(6, 6)) * 10
    a, _ = bayes.normalize_log(ll)
    b, _ = bayes.normalize_log(ll + shift)
    assert np.argmax(a) == np.argmax(b)
    assert np.exp(b).sum() == pytest.approx(1.0, abs=1e-9)


def test_zero_noise_recovers_source_cell(cfg, clean):
    est, post = bayes.map_estimate(clean)
    assert post.argmax() == cfg.source_cell()
    assert est.error <= np.hypot(cfg.dx, cfg.dy)
    assert est.info["tie_break"] == "lowest index"


def test_zero_noise_true_candidate_is_global_maximum(cfg, clean):
    xs, ys, ll = bayes.grid_log_likelihood(clean)
    i, j = cfg.source_cell()
    assert ll[i, j] == ll.max() and abs(ll[i, j]) < 1e-12 * abs(ll.min())


def test_mirror_symmetric_sensors_give_symmetric_posterior():
    cfg = make_config(grid=(21, 21), total_time=0.2, injection_duration=0.1,
                      source_pos=(6.5e-6, 3.0e-6))
    y_axis = 10.5 * cfg.dy
    sensors = [(3.5 * cfg.dx, y_axis), (16.5 * cfg.dx, y_axis)]
    tr = observe(cfg, sensors, uniform_times(cfg.total_time, 30), seed=3)
    _, post = bayes.map_estimate(tr)
    np.testing.assert_allclose(post.prob, post.prob[:, ::-1], rtol=0, atol=1e-9)


def test_uninformative_data_flag(cfg):
    t = uniform_times(0.2, 5)
    z = np.zeros((5, 1))
    # every candidate predicts zero at t=0+ only if nothing is emitted
    quiet = cfg.replace(emission=0.0)
    tr = SensorTrace([(5e-6, 5e-6)], t, z, z, 1.0, None, quiet)
    est, post = bayes.map_estimate(tr)
    assert "uninformative data" in est.flags
    assert post.tie_count == 400 and post.argmax() == (0, 0)


def test_map_input_errors(trace):
    with pytest.raises(ValueError):
        bayes.map_estimate(trace, nc=1)


def test_posterior_exports(tmp_path, trace):
    from odorloc.grid_pde import read_pgm
    _, post = bayes.map_estimate(trace)
    bayes.write_posterior_csv(post, tmp_path / "p.csv")
    rows = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert rows.shape == (400, 4)
    assert rows[:, 3].sum() == pytest.approx(1.0, abs=1e-9)
    bayes.write_posterior_pgm(post, tmp_path / "p.pgm")
    img = read_pgm(tmp_path / "p.pgm")
    assert img.size == 400 and img.max() == 255


def test_bank_cache_hits(cfg, trace):
    a = bayes.cached_bank(cfg, trace.sensors, trace.times)
    b = bayes.cached_bank(cfg, trace.sensors, trace.times)
    assert a is b and not a.flags.writeable


# ---------------------------------------------------------------------------
# Kalman filter

def _linear_state():
    return bayes.FilterState(np.array([0.3, -0.2]), np.array([[0.5, 0.1], [0.1, 0.8]]))


def test_filter_state_validation():
    with pytest.raises(ValueError):
        bayes.FilterState(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        bayes.FilterState(np.zeros(2), -np.eye(2))
    with pytest.raises(ValueError):
        bayes.FilterState(np.zeros(2), np.eye(3))


def test_huge_measurement_variance_leaves_state_unchanged():
    s = _linear_state()
    a = np.array([1.5, -0.7])
    out = bayes.kalman_update(s, [4.0], lambda x: np.array([a @ x]), 1e30, process_var=0.0)
    np.testing.assert_allclose(out.mean, s.mean, rtol=1e-9)
    np.testing.assert_allclose(out.cov, s.cov, rtol=1e-9)


def test_linear_model_matches_textbook_kalman():
    rng = np.random.default_rng(0)
    s = _linear_state()
    A = rng.normal(size=(3, 2))
    R = np.diag([0.2, 0.5, 0.3])
    q = 1e-3
    for _ in range(10):
        z = rng.normal(size=3)
        out = bayes.kalman_update(s, z, lambda x: A @ x, R, process_var=q, fd_step=1e-3)
        P = s.cov + q * np.eye(2)
        K = P @ A.T @ np.linalg.inv(A @ P @ A.T + R)
        mean = s.mean + K @ (z - A @ s.mean)
        cov = (np.eye(2) - K @ A) @ P
        np.testing.assert_allclose(out.mean, mean, rtol=0, atol=1e-10)
        np.testing.assert_allclose(out.cov, cov, rtol=0, atol=1e-10)
        assert np.array_equal(out.cov, out.cov.T)
        s = out


def test_update_rejects_bad_inputs():
    s = _linear_state()
    with pytest.raises(ValueError):
        bayes.kalman_update(s, [0.0], lambda x: x[:1], 0.0)
    with pytest.raises(bayes.FilterDivergence):
        bayes.kalman_update(s, [0.0], lambda x: x[:1], 1.0, jacobian=lambda x: np.array([[np.nan, 0]]))


def test_covariance_repair_is_flagged():
    s = bayes.FilterState(np.zeros(2), np.diag([1e-17, 1.0]))
    out = bayes.kalman_update(s, [0.0], lambda x: x[:1], 1e-30, process_var=0.0)
    assert np.linalg.eigvalsh(out.cov).min() >= bayes.REPAIR_FLOOR * 0.999
    assert any("repaired" in f for f in out.flags)


def test_zero_innovation_keeps_mean_and_shrinks_covariance(cfg, trace):
    init = bayes.initial_state(cfg)
    bank = bayes.cached_bank(cfg, trace.sensors, trace.times)
    z = np.array([bayes.bank_model(bank[k], cfg)(init.mean) for k in range(len(trace))])
    tr = SensorTrace(trace.sensors, trace.times, z, z, trace.noise_sigma, None, cfg)
    _, traj = bayes.run_filter(tr, init=init, process_var=0.0)
    for a, b in zip(traj, traj[1:]):
        np.testing.assert_array_equal(b.mean, init.mean)
        assert np.linalg.eigvalsh(a.cov - b.cov).min() >= -1e-12 * np.abs(a.cov).max()


def test_replayed_trace_tightens_covariance(trace, cfg):
    _, first = bayes.run_filter(trace, process_var=0.0)
    _, second = bayes.run_filter(trace, init=first[-1], process_var=0.0)
    assert np.linalg.eigvalsh(first[-1].cov - second[-1].cov).min() >= 0


def test_filter_states_stay_symmetric_pd(trace):
    est, traj = bayes.run_filter(trace)
    assert len(traj) == len(trace) + 1 and traj[-1].step == len(trace)
    for s in traj:
        assert np.array_equal(s.cov, s.cov.T)
        assert np.linalg.eigvalsh(s.cov).min() > 0
    lx, ly = trace.config.domain_size
    assert 0 <= est.position[0] <= lx and 0 <= est.position[1] <= ly


def test_reference_trajectory_settles():
    cfg = dataset_config()
    tr = observe(cfg, [(2e-6, 3e-6)], uniform_times(cfg.total_time), seed=0)
    _, traj = bayes.run_filter(tr)
    m = np.array([s.mean for s in traj])
    tail = np.linalg.norm(m - m[-1], axis=1)[int(0.75 * len(m)):]
    blocks = [b.max() for b in np.array_split(tail, 4)]
    assert blocks[-1] < blocks[0]
    assert tail.max() < 0.02 * cfg.dx


def test_trajectory_export(tmp_path, trace):
    _, traj = bayes.run_filter(trace)
    bayes.write_trajectory_csv(traj, tmp_path / "t.csv")
    rows = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert rows.shape == (len(traj), 6)
    np.testing.assert_array_equal(rows[:, 0], np.arange(len(traj)))


def test_run_filter_rejects_empty(cfg):
    tr = SensorTrace([(5e-6, 5e-6)], np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1)), 1.0, None, cfg)
    with pytest.raises(ValueError):
        bayes.run_filter(tr)
