"""
Tests for the streaming detector state machine
"""

import dataclasses
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as nph

from modules.detector import (AlertMatrix, AlertRecord, DetectorConfig, DetectorState, SparseAnomalyDetector,
                              ewma, init_from_warmup, read_checkpoint, run_stream, step, write_checkpoint)
from modules.errors import ConfigError, DataError
from modules.evalkit import EvalReport
from modules.subspace import SubspaceEstimate


def two_stream_state():
    return DetectorState(nu_x=np.zeros(2), nu_r=np.zeros(2), sigma2_r=np.ones(2),
                         subspace=SubspaceEstimate.empty(2), tick=100)


def config(**kwargs):
    values = dict(lambda_=1e-4, lambda_mu=1e-3, lambda_sigma=1e-3, control_limit=5.0, reg_guard=3.0,
                  warmup_len=50)
    values.update(kwargs)
    return DetectorConfig(**values)


@pytest.mark.parametrize("old, obs, memory, expected", [
    (0.0, 1.0, 0.1, 0.1),
    (3.0, 3.0, 0.37, 3.0),
    (2.0, 0.0, 0.25, 1.5),
])
def test_ewma(old, obs, memory, expected):
    assert ewma(old, obs, memory) == pytest.approx(expected)


def test_step_alerts_on_large_residual():
    state, r, alerts = step(two_stream_state(), np.array([6.0, 0.0]), config())
    assert alerts == frozenset({0})
    assert state.last_alerts == frozenset({0})
    assert state.tick == 101
    assert r[0] == pytest.approx(6.0 * (1 - 1e-4))


def test_step_guard_skips_variance_update():
    state, _, _ = step(two_stream_state(), np.array([6.0, 0.0]), config(reg_guard=4.0))
    assert state.sigma2_r[0] == 1.0
    assert state.sigma2_r[1] == pytest.approx(1.0 - 1e-3)
    assert state.nu_r[0] == 0.0


def test_zero_control_limit_alerts_on_every_nonzero_residual():
    _, _, alerts = step(two_stream_state(), np.array([6.0, 0.5]), config(control_limit=0.0))
    assert alerts == frozenset({0, 1})
    _, _, alerts = step(two_stream_state(), np.array([0.0, 0.5]), config(control_limit=0.0))
    assert alerts == frozenset({1})


def test_mean_frozen_for_streams_alerting_previously():
    state = two_stream_state()
    state.last_alerts = frozenset({0})
    new, _, _ = step(state, np.array([1.0, 1.0]), config(lambda_=0.5))
    assert new.nu_x[0] == 0.0
    assert new.nu_x[1] == pytest.approx(0.5)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_step_rejects_non_finite_ticks_without_touching_state(bad):
    state = two_stream_state()
    before = state.copy()
    with pytest.raises(DataError):
        step(state, np.array([bad, 0.0]), config())
    np.testing.assert_array_equal(state.nu_x, before.nu_x)
    np.testing.assert_array_equal(state.sigma2_r, before.sigma2_r)
    assert state.tick == before.tick


def test_step_rejects_wrong_length():
    with pytest.raises(DataError):
        step(two_stream_state(), np.zeros(3), config())


def test_step_does_not_mutate_input_state():
    state = two_stream_state()
    step(state, np.array([1.0, 2.0]), config())
    np.testing.assert_array_equal(state.nu_x, [0.0, 0.0])


def test_init_from_warmup_on_noiseless_low_rank_data(rng):
    B = rng.standard_normal((10, 2))
    X = B @ rng.standard_normal((2, 200))
    state = init_from_warmup(X, config(warmup_len=200, n_components=2))
    assert state.subspace.k == 2
    np.testing.assert_allclose(state.sigma2_r, 1e-12)
    assert state.tick == 200
    assert state.last_alerts == frozenset()


def test_init_from_warmup_iid_noise_without_subspace(rng):
    X = rng.standard_normal((5, 10080))
    state = init_from_warmup(X, config(warmup_len=10080, n_components=0))
    assert state.subspace.k == 0
    np.testing.assert_allclose(state.sigma2_r, 1.0, atol=0.05)
    np.testing.assert_allclose(state.nu_x, X.mean(axis=1))


def test_init_from_warmup_checks_length(rng):
    with pytest.raises(ConfigError):
        init_from_warmup(rng.standard_normal((3, 40)), config(warmup_len=50))


def test_run_stream_single_step(rng):
    X = rng.standard_normal((4, 51))
    result = run_stream(X, config(n_components=1))
    assert result.residuals.shape == (4, 1)
    assert result.state.tick == 51
    assert result.alerts.start_tick == 50 and result.alerts.T == 51


def test_run_stream_needs_data_after_warmup(rng):
    with pytest.raises(ConfigError):
        run_stream(rng.standard_normal((4, 50)), config())


def test_run_stream_skips_invalid_ticks(rng):
    X = rng.standard_normal((4, 60))
    X[2, 55] = np.nan
    result = run_stream(X, config(n_components=1))
    assert result.rejected_ticks == [55]
    assert np.all(np.isnan(result.residuals[:, 5]))
    assert np.isnan(result.scores[5])
    assert np.all(np.isfinite(np.delete(result.residuals, 5, axis=1)))


def test_scores_reproduce_row_alerts(small_dataset, small_config):
    result = run_stream(small_dataset.data, small_config)
    assert result.scores.shape == (small_dataset.T - small_config.warmup_len,)
    np.testing.assert_array_equal(result.alerts.to_dense().any(axis=0),
                                  result.scores > small_config.control_limit)


def test_recommended_config_keeps_few_components_on_preset_warmup():
    from modules.evalkit import recommended_config
    from modules.synthgen import default_preset, synthesize_background

    model, _, _ = default_preset(seed=0)
    cfg = recommended_config(7, 6)
    state = init_from_warmup(synthesize_background(model, cfg.warmup_len, seed=1), cfg)
    assert 1 <= state.subspace.k <= 5


def test_anomaly_free_stream_stays_quiet(small_dataset, small_config):
    result = run_stream(small_dataset.background, dataclasses.replace(small_config, control_limit=20.0))
    assert len(result.alerts) == 0


def test_detects_and_identifies_planted_anomaly(small_dataset, small_config):
    result = run_stream(small_dataset.data, small_config)
    report = EvalReport.from_alerts(result.alerts, small_dataset.mask)
    assert report.tpr_rows >= 0.9
    assert report.fpr_rows <= 0.05
    assert report.tpr_indiv >= 0.8
    assert report.fpr_indiv <= 0.05
    for record in result.alerts.records:
        assert record.centered_abs > record.threshold


@settings(max_examples=100, deadline=None)
@given(x=nph.arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)),
       sigma2=nph.arrays(np.float64, 3, elements=st.floats(1e-6, 1e3)),
       alerted=st.sets(st.integers(0, 2)))
def test_step_is_deterministic(x, sigma2, alerted):
    state = DetectorState(nu_x=np.zeros(3), nu_r=np.zeros(3), sigma2_r=sigma2,
                          subspace=SubspaceEstimate(basis=np.array([[1.0], [0.0], [0.0]]), eigenvalues=[1.0]),
                          last_alerts=frozenset(alerted))
    cfg = config(eta=1e-3)
    first, r1, a1 = step(state, x, cfg)
    second, r2, a2 = step(state, x, cfg)
    np.testing.assert_array_equal(r1, r2)
    assert a1 == a2
    np.testing.assert_array_equal(first.sigma2_r, second.sigma2_r)
    np.testing.assert_array_equal(first.subspace.basis, second.subspace.basis)


@settings(max_examples=100, deadline=None)
@given(ticks=nph.arrays(np.float64, (40, 3), elements=st.floats(-1e4, 1e4)),
       lambda_sigma=st.floats(1e-4, 0.9))
def test_residual_variance_stays_positive(ticks, lambda_sigma):
    state = DetectorState(nu_x=np.zeros(3), nu_r=np.zeros(3), sigma2_r=np.full(3, 1e-12),
                          subspace=SubspaceEstimate.empty(3))
    cfg = config(lambda_sigma=lambda_sigma, reg_guard=float('inf'))
    for x in ticks:
        state, _, _ = step(state, x, cfg, inplace=True)
        assert np.all(state.sigma2_r > 0)


def test_guard_freezes_variance_during_large_excursion():
    state = two_stream_state()
    cfg = config(reg_guard=3.0)
    for _ in range(25):
        state, _, _ = step(state, np.array([50.0, 0.1]), cfg, inplace=True)
        assert state.sigma2_r[0] == 1.0
        assert state.nu_r[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), low=st.floats(0.0, 5.0), extra=st.floats(0.0, 5.0))
def test_alerts_nested_in_control_limit_without_feedback(seed, low, extra):
    rng = np.random.default_rng(seed)
    ticks = rng.standard_normal((30, 4)) * rng.uniform(0.5, 4.0)
    states = [DetectorState(nu_x=np.zeros(4), nu_r=np.zeros(4), sigma2_r=np.ones(4),
                            subspace=SubspaceEstimate.empty(4)) for _ in range(2)]
    configs = [config(control_limit=low, reg_guard=float('inf')),
               config(control_limit=low + extra, reg_guard=float('inf'))]
    for x in ticks:
        alerts = []
        for i in range(2):
            states[i], _, fired = step(states[i], x, configs[i], inplace=True)
            states[i].last_alerts = frozenset()
            alerts.append(fired)
        assert alerts[1] <= alerts[0]


def test_checkpoint_round_trip(tmp_path, rng):
    X = rng.standard_normal((6, 80))
    result = run_stream(X, config(n_components=2, control_limit=0.5))
    path = tmp_path / "state.txt"
    write_checkpoint(result.state, str(path))
    restored = read_checkpoint(str(path))
    np.testing.assert_array_equal(restored.nu_x, result.state.nu_x)
    np.testing.assert_array_equal(restored.sigma2_r, result.state.sigma2_r)
    np.testing.assert_array_equal(restored.subspace.basis, result.state.subspace.basis)
    np.testing.assert_array_equal(restored.subspace.eigenvalues, result.state.subspace.eigenvalues)
    assert restored.last_alerts == result.state.last_alerts
    assert restored.tick == 80


def test_checkpoint_without_extension_block(tmp_path, rng):
    X = rng.standard_normal((3, 60))
    state = run_stream(X, config(n_components=1)).state
    path = tmp_path / "state.txt"
    write_checkpoint(state, str(path))
    lines = path.read_text().splitlines()
    base_length = 2 + 3 * 3 + 3 * 1 + 1
    assert lines[0] == "3" and lines[1] == "1"
    path.write_text("\n".join(lines[:base_length]) + "\n")
    restored = read_checkpoint(str(path))
    assert restored.tick == 60
    assert restored.last_alerts == frozenset()
    np.testing.assert_array_equal(restored.nu_r, state.nu_r)


def test_truncated_checkpoint_is_a_data_error(tmp_path):
    path = tmp_path / "state.txt"
    path.write_text("3\n1\n0.5\n")
    with pytest.raises(DataError):
        read_checkpoint(str(path))


def test_resumed_detector_matches_uninterrupted_run(tmp_path, rng):
    X = rng.standard_normal((5, 120))
    cfg = config(n_components=1, control_limit=2.0)
    full = run_stream(X, cfg)

    detector = SparseAnomalyDetector(cfg)
    first = detector.run(X[:, :90])
    detector.save_checkpoint(str(tmp_path / "ckpt.txt"))
    resumed = SparseAnomalyDetector(cfg).load_checkpoint(str(tmp_path / "ckpt.txt"))
    second = resumed.run(X[:, 90:])

    combined = [(r.tick, r.stream) for r in first.alerts.records + second.alerts.records]
    assert combined == [(r.tick, r.stream) for r in full.alerts.records]
    np.testing.assert_allclose(second.residuals, full.residuals[:, 40:])


def test_detector_update_requires_state():
    with pytest.raises(ConfigError):
        SparseAnomalyDetector().update(np.zeros(3))
    assert SparseAnomalyDetector().get_stats() == {'status': 'not_initialized'}


def test_detector_update_matches_step(rng):
    X = rng.standard_normal((4, 70))
    cfg = config(n_components=1, control_limit=1.0)
    detector = SparseAnomalyDetector(cfg).fit_warmup(X[:, :50])
    state = init_from_warmup(X[:, :50], cfg)
    for x in X[:, 50:].T:
        state, _, expected = step(state, x, cfg)
        assert detector.update(x) == expected
    assert detector.get_stats()['tick'] == 70


def test_alert_matrix_validation_and_dense_view():
    records = [AlertRecord(tick=5, stream=1, residual=3.0, centered_abs=3.0, threshold=1.0)]
    dense = AlertMatrix(records=records, p=2, T=8, start_tick=4).to_dense()
    assert dense.shape == (2, 4)
    assert dense[1, 1] and dense.sum() == 1
    with pytest.raises(DataError):
        AlertMatrix(records=records * 2, p=2, T=8)
    with pytest.raises(DataError):
        AlertMatrix(records=records, p=1, T=8)


@pytest.mark.parametrize("kwargs", [
    dict(lambda_=0.0), dict(lambda_mu=1.0), dict(eta=-1e-3), dict(control_limit=-1.0),
    dict(reg_guard=0.0), dict(var_fraction=1.5), dict(warmup_len=1), dict(n_components=-1),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DetectorConfig(**kwargs)


def test_config_warns_when_guard_below_limit(caplog):
    with caplog.at_level(logging.WARNING, logger="modules.detector"):
        DetectorConfig(control_limit=2.5, reg_guard=1.2345)
    assert "reg_guard=1.2345" in caplog.text


def test_config_file_round_trip(tmp_path):
    original = DetectorConfig(lambda_=1e-3, control_limit=5.0, reg_guard=4.0, n_components=3)
    path = tmp_path / "detector.cfg"
    original.to_file(str(path))
    assert DetectorConfig.from_file(str(path)) == original


def test_config_file_parsing(tmp_path):
    path = tmp_path / "detector.cfg"
    path.write_text("# tuned for strong anomalies\nlambda = 0.001\ncontrol_limit = 5\nreg_guard = inf\n")
    cfg = DetectorConfig.from_file(str(path))
    assert cfg.lambda_ == 1e-3
    assert cfg.control_limit == 5.0
    assert cfg.reg_guard == float('inf')
    assert cfg.to_dict()['lambda_sigma'] == DetectorConfig().lambda_sigma


@pytest.mark.parametrize("content", ["unknown_key = 1\n", "control_limit = five\n", "warmup_len = 2.5\n"])
def test_config_file_errors(tmp_path, content):
    path = tmp_path / "detector.cfg"
    path.write_text(content)
    with pytest.raises(ConfigError):
        DetectorConfig.from_file(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        DetectorConfig.from_file(str(tmp_path / "absent.cfg"))


@pytest.mark.slow
def test_default_protocol_rates():
    from modules.evalkit import recommended_config
    from modules.synthgen import default_preset, synthesize_dataset

    rates = {5.0: [], 7.0: [], 20.0: []}
    for seed in range(5):
        model, spec, T = default_preset(snr=7, duration_hours=6, seed=seed)
        dataset = synthesize_dataset(model, spec, T, seed=seed + 100)
        for limit in rates:
            cfg = recommended_config(7, 6, control_limit=limit)
            rates[limit].append(EvalReport.from_alerts(run_stream(dataset.data, cfg).alerts, dataset.mask))

    assert np.mean([r.tpr_rows for r in rates[5.0]]) >= 0.95
    assert np.mean([r.fpr_rows for r in rates[5.0]]) <= 0.05
    assert 0.75 <= np.mean([r.tpr_indiv for r in rates[7.0]]) <= 0.97
    assert np.mean([r.fpr_indiv for r in rates[7.0]]) <= 0.01
    assert np.mean([r.tpr_rows for r in rates[20.0]]) <= 0.25
