"""
Tests for the synthetic traffic generator
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modules.errors import ConfigError
from modules.synthgen import (AnomalySpec, NoiseSpec, TrendSpec, build_factor_matrix, build_factor_model,
                              fgn_autocovariance, generate_fgn, generate_trends, incoherence_check,
                              default_preset, seed_sequence, sparse_streams, synthesize_background,
                              synthesize_dataset)


@pytest.mark.parametrize("hurst, lag, expected", [
    (0.5, 0, 1.0),
    (0.5, 1, 0.0),
    (0.5, 7, 0.0),
    (0.9, 0, 1.0),
    (0.9, 1, 0.5 * (2 ** 1.8 - 2)),
    (0.7, 1, 0.5 * (2 ** 1.4 - 2)),
])
def test_fgn_autocovariance(hurst, lag, expected):
    assert fgn_autocovariance(NoiseSpec(hurst=hurst), lag) == pytest.approx(expected, abs=1e-12)


def test_fgn_autocovariance_scales_with_variance():
    assert fgn_autocovariance(NoiseSpec(hurst=0.8, variance=4.0), 0) == pytest.approx(4.0)


def test_generate_fgn_shapes():
    noise = NoiseSpec(hurst=0.8)
    assert generate_fgn(noise, 100, seed=1).shape == (100,)
    assert generate_fgn(noise, 100, seed=1, size=4).shape == (4, 100)
    assert generate_fgn(noise, 1, seed=1).shape == (1,)


def test_generate_fgn_is_seeded():
    noise = NoiseSpec(hurst=0.9)
    np.testing.assert_array_equal(generate_fgn(noise, 500, seed=3), generate_fgn(noise, 500, seed=3))
    assert not np.array_equal(generate_fgn(noise, 500, seed=3), generate_fgn(noise, 500, seed=4))


def test_generate_fgn_strict_mode_accepts_valid_embedding():
    noise = NoiseSpec(hurst=0.95)
    np.testing.assert_array_equal(generate_fgn(noise, 256, seed=2, strict=True),
                                  generate_fgn(noise, 256, seed=2))


def test_generate_fgn_marginal_variance_and_lag_one_correlation():
    samples = generate_fgn(NoiseSpec(hurst=0.7, variance=1.0), 2000, seed=5, size=200)
    assert np.mean(samples ** 2) == pytest.approx(1.0, abs=0.08)
    lag_one = np.mean(samples[:, 1:] * samples[:, :-1])
    assert lag_one == pytest.approx(0.5 * (2 ** 1.4 - 2), abs=0.05)


def test_generate_fgn_white_noise_has_no_lag_one_correlation():
    x = generate_fgn(NoiseSpec(hurst=0.5), 100_000, seed=7)
    assert np.mean(x[1:] * x[:-1]) == pytest.approx(0.0, abs=0.02)


def test_generate_fgn_long_memory_lag_one_correlation_on_average():
    # single runs scatter with sd ~0.13
    noise = NoiseSpec(hurst=0.9)
    lag_ones = [np.mean(x[1:] * x[:-1]) for x in (generate_fgn(noise, 100_000, seed=s) for s in range(64))]
    assert np.mean(lag_ones) == pytest.approx(0.5 * (2 ** 1.8 - 2), abs=0.05)


def test_generate_fgn_rejects_empty_series():
    with pytest.raises(ConfigError):
        generate_fgn(NoiseSpec(), 0, seed=0)


@pytest.mark.parametrize("kwargs", [
    dict(hurst=0.0), dict(hurst=1.0), dict(hurst=0.5, variance=0.0),
])
def test_noise_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        NoiseSpec(**kwargs)


def test_factor_matrix_default_shape():
    B = build_factor_matrix(100, 5, seed=0)
    assert B.shape == (100, 5)
    assert B.sum(axis=0).astype(int).tolist() == [100, 80, 60, 40, 20]
    assert np.all(B[:, 0] == 1.0)
    assert np.linalg.matrix_rank(B) == 5


@settings(max_examples=100, deadline=None)
@given(p=st.integers(min_value=5, max_value=60), k=st.integers(min_value=1, max_value=5),
       seed=st.integers(min_value=0, max_value=2 ** 31))
def test_factor_matrix_counts_and_rank(p, k, seed):
    B = build_factor_matrix(p, k, seed)
    assert set(np.unique(B)) <= {0.0, 1.0}
    for j in range(k):
        assert int(B[:, j].sum()) == ((k - j) * p) // k
    assert np.linalg.matrix_rank(B) == k


def test_factor_matrix_rejects_more_trends_than_streams():
    with pytest.raises(ConfigError):
        build_factor_matrix(3, 5, seed=0)


def test_generate_trends_rows():
    trends = (TrendSpec(period=4, amplitude=2.0), TrendSpec(period=8, phase_offset=math.pi / 2))
    F = generate_trends(trends, 8)
    np.testing.assert_allclose(F[0], 2.0 * np.sin(2 * np.pi * np.arange(8) / 4), atol=1e-12)
    np.testing.assert_allclose(F[1, 0], 1.0)


@pytest.mark.parametrize("period, phase", [(1, 0.0), (2.5, 0.0), (10, -0.1), (10, 2 * math.pi)])
def test_trend_spec_validation(period, phase):
    with pytest.raises(ConfigError):
        TrendSpec(period=period, phase_offset=phase)


@pytest.mark.parametrize("p, beta, expected", [
    (100, 0.75, (0, 1, 2)),
    (500, 0.75, (0, 1, 2, 3)),
    (5000, 0.75, tuple(range(8))),
    (100, 1.0, (0,)),
])
def test_sparse_streams(p, beta, expected):
    assert sparse_streams(p, beta) == expected


@pytest.mark.parametrize("hours, ticks", [(1, 30), (6, 180)])
def test_default_preset(hours, ticks):
    model, spec, T = default_preset(snr=7, duration_hours=hours, seed=0)
    assert T == 25200
    assert spec.start_tick == 15120
    assert spec.duration_ticks == ticks
    assert spec.streams == (0, 1, 2)
    assert model.loadings.shape == (100, 5)
    assert model.noise.hurst == 0.9


def test_default_preset_explicit_length_and_start():
    model, spec, T = default_preset(duration_hours=6, tick_minutes=60, T=600, start_tick=400, variance=2.0)
    assert (T, spec.start_tick, spec.duration_ticks) == (600, 400, 6)
    assert model.noise.variance == 2.0


def test_synthesize_dataset_labels_and_amplitudes():
    model = build_factor_model(10, k=2, noise=NoiseSpec(hurst=0.6), seed=1, periods=(20, 30))
    spec = AnomalySpec(snr=3.0, duration_ticks=15, start_tick=400, streams=(2, 5))
    dataset = synthesize_dataset(model, spec, T=500, seed=2, warmup_len=300)

    assert dataset.data.shape == dataset.mask.shape == (10, 500)
    assert int(dataset.mask.sum()) == 2 * 15
    assert dataset.mask[2, 400] and dataset.mask[5, 414] and not dataset.mask[5, 415]

    stds = dataset.background[:, :300].std(axis=1, ddof=1)
    np.testing.assert_allclose(dataset.amplitudes[[2, 5]], 3.0 * stds[[2, 5]])
    assert np.count_nonzero(dataset.amplitudes) == 2
    np.testing.assert_allclose(dataset.data - dataset.background, dataset.amplitudes[:, None] * dataset.mask)
    assert dataset.duration_hours == pytest.approx(0.5)


def test_doubling_snr_doubles_the_shift():
    model = build_factor_model(10, k=2, noise=NoiseSpec(hurst=0.8), seed=1, periods=(20, 30))
    weak = synthesize_dataset(model, AnomalySpec(snr=2.0, duration_ticks=15, start_tick=400, streams=(1, 4)),
                              T=500, seed=2, warmup_len=300)
    strong = synthesize_dataset(model, AnomalySpec(snr=4.0, duration_ticks=15, start_tick=400, streams=(1, 4)),
                                T=500, seed=2, warmup_len=300)
    np.testing.assert_array_equal(weak.background, strong.background)
    np.testing.assert_allclose(strong.data - strong.background, 2.0 * (weak.data - weak.background))


def test_synthesize_dataset_is_seeded():
    model = build_factor_model(8, k=2, seed=1, periods=(20, 30))
    spec = AnomalySpec(snr=2.0, duration_ticks=5, start_tick=100, streams=(0,))
    first = synthesize_dataset(model, spec, T=200, seed=9, warmup_len=100)
    second = synthesize_dataset(model, spec, T=200, seed=9, warmup_len=100)
    np.testing.assert_array_equal(first.data, second.data)


def test_background_is_low_rank_plus_noise():
    model = build_factor_model(12, k=3, noise=NoiseSpec(hurst=0.5, variance=1e-12), seed=4,
                               amplitude=2.0, periods=(20, 30, 50))
    X = synthesize_background(model, 300, seed=1)
    singular = np.linalg.svd(X, compute_uv=False)
    assert singular[3] < 1e-3 * singular[0]


@pytest.mark.parametrize("kwargs", [
    dict(snr=-1.0, duration_ticks=1, start_tick=0),
    dict(snr=1.0, duration_ticks=0, start_tick=0),
    dict(snr=1.0, duration_ticks=1, start_tick=-1),
    dict(snr=1.0, duration_ticks=1, start_tick=0, streams=(1, 1)),
])
def test_anomaly_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        AnomalySpec(**kwargs)


def test_anomaly_window_must_fit_the_series():
    model = build_factor_model(5, k=1, seed=0, periods=(20,))
    with pytest.raises(ConfigError):
        synthesize_dataset(model, AnomalySpec(snr=1.0, duration_ticks=10, start_tick=95), T=100, seed=0)
    with pytest.raises(ConfigError):
        synthesize_dataset(model, AnomalySpec(snr=1.0, duration_ticks=1, start_tick=0, streams=(5,)),
                           T=100, seed=0)


def test_incoherence_check():
    lambda_min, max_entry = incoherence_check(np.ones((25, 1)))
    assert lambda_min == pytest.approx(25.0)
    assert max_entry == 1.0
    model = build_factor_model(100, k=5, seed=0)
    lambda_min, _ = incoherence_check(model.loadings)
    assert lambda_min > 0.0


def test_incoherence_check_flags_duplicate_columns():
    B = np.zeros((6, 2))
    B[:3] = 1.0
    lambda_min, max_entry = incoherence_check(B[:, [0, 0]])
    assert lambda_min == pytest.approx(0.0, abs=1e-9)
    assert max_entry == 1.0
    assert incoherence_check(np.ones((4, 1))) == pytest.approx((4.0, 1.0))


def test_factor_model_accepts_spawned_seed_sequences():
    child = np.random.SeedSequence(5).spawn(1)[0]
    first = build_factor_model(20, k=3, seed=child)
    second = build_factor_model(20, k=3, seed=np.random.SeedSequence(5).spawn(1)[0])
    np.testing.assert_array_equal(first.loadings, second.loadings)
    assert seed_sequence(child) is child
