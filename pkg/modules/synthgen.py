"""
Synthetic Traffic Module for the Telescope Anomaly Toolkit
Generates labeled factor-model traffic with long-range dependent noise and sparse anomalies
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EmbeddingError

logger = logging.getLogger(__name__)

# Periods in 2-minute ticks: two daily trends, one weekly, 6 h and 4.8 h
PRESET_TREND_PERIODS = (720, 720, 5040, 180, 144)
PRESET_TREND_COUNT = len(PRESET_TREND_PERIODS)
PRESET_SNRS = (2.0, 3.0, 5.0, 7.0)
PRESET_DURATIONS_HOURS = (1.0, 6.0)
TICKS_PER_WEEK = 5040
EMBEDDING_TOLERANCE = 1e-10
MAX_PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class NoiseSpec:
    """Fractional Gaussian noise parameters (Hurst exponent and marginal variance)"""
    hurst: float = 0.9
    variance: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.hurst < 1.0:
            raise ConfigError(f"Hurst parameter must lie in (0, 1), got {self.hurst}")
        if self.variance <= 0.0:
            raise ConfigError(f"Noise variance must be positive, got {self.variance}")


@dataclass(frozen=True)
class TrendSpec:
    """One sinusoidal factor f_t(j)"""
    period: int
    amplitude: float = 1.0
    phase_offset: float = 0.0

    def __post_init__(self):
        if int(self.period) != self.period or self.period < 2:
            raise ConfigError(f"Trend period must be an integer >= 2, got {self.period}")
        if not 0.0 <= self.phase_offset < 2 * math.pi:
            raise ConfigError(f"Phase offset must lie in [0, 2*pi), got {self.phase_offset}")


@dataclass(frozen=True, eq=False)
class FactorModel:
    """Loadings B (p x k), the k trends and the noise specification"""
    loadings: np.ndarray
    trends: Tuple[TrendSpec, ...]
    noise: NoiseSpec

    def __post_init__(self):
        loadings = np.asarray(self.loadings, dtype=float)
        if loadings.ndim != 2 or loadings.size == 0:
            raise ConfigError("Loadings must be a non-empty p x k matrix")
        if loadings.shape[1] != len(self.trends):
            raise ConfigError(
                f"Loadings have {loadings.shape[1]} columns but {len(self.trends)} trends were given"
            )
        if np.linalg.matrix_rank(loadings) < loadings.shape[1]:
            raise ConfigError("Loadings columns must be linearly independent")
        object.__setattr__(self, 'loadings', loadings)
        object.__setattr__(self, 'trends', tuple(self.trends))

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def k(self) -> int:
        return self.loadings.shape[1]


@dataclass(frozen=True)
class AnomalySpec:
    """Mean-shift anomaly: snr multiples of the per-stream standard deviation"""
    snr: float
    duration_ticks: int
    start_tick: int
    streams: Tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.snr < 0.0:
            raise ConfigError(f"snr must be non-negative, got {self.snr}")
        if self.duration_ticks < 1:
            raise ConfigError(f"Anomaly duration must be positive, got {self.duration_ticks}")
        if self.start_tick < 0:
            raise ConfigError(f"Anomaly start must be non-negative, got {self.start_tick}")
        streams = tuple(int(s) for s in self.streams)
        if len(set(streams)) != len(streams):
            raise ConfigError(f"Anomalous streams must be distinct, got {streams}")
        if any(s < 0 for s in streams):
            raise ConfigError(f"Stream indices must be non-negative, got {streams}")
        object.__setattr__(self, 'streams', streams)

    def validate_against(self, p: int, T: int) -> None:
        if self.start_tick + self.duration_ticks > T:
            raise ConfigError(
                f"Anomaly window [{self.start_tick}, {self.start_tick + self.duration_ticks}) "
                f"exceeds series length {T}"
            )
        if any(s >= p for s in self.streams):
            raise ConfigError(f"Stream indices {self.streams} out of range for p={p}")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Observed traffic together with its ground truth"""
    data: np.ndarray
    mask: np.ndarray
    model: FactorModel
    spec: AnomalySpec
    amplitudes: np.ndarray
    background: np.ndarray
    tick_minutes: float = 2.0

    @property
    def p(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def duration_hours(self) -> float:
        return self.spec.duration_ticks * self.tick_minutes / 60.0


def seed_sequence(seed) -> np.random.SeedSequence:
    """Pass SeedSequence children through, wrap ints and None"""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def fgn_autocovariance(noise: NoiseSpec, lag) -> float:
    """gamma(h) = (sigma^2 / 2)(|h+1|^2H - 2|h|^2H + |h-1|^2H)"""
    h = np.abs(np.asarray(lag, dtype=float))
    two_h = 2.0 * noise.hurst
    gamma = 0.5 * noise.variance * (
        np.abs(h + 1.0) ** two_h - 2.0 * h ** two_h + np.abs(h - 1.0) ** two_h
    )
    if gamma.ndim == 0:
        return float(gamma)
    return gamma


def generate_fgn(noise: NoiseSpec, n: int, seed, size: Optional[int] = None,
                 strict: bool = False) -> np.ndarray:
    """Sample fractional Gaussian noise by circulant embedding (Davies-Harte).

    Args:
        noise: Hurst exponent and variance of the process.
        n: Length of each series.
        seed: Anything accepted by ``numpy.random.default_rng``.
        size: Number of independent series to draw. ``None`` returns a single
            vector of length ``n``, otherwise a ``size x n`` matrix.
        strict: Raise ``EmbeddingError`` instead of clipping when the
            embedding has negative eigenvalues beyond tolerance.
    """
    if n < 1:
        raise ConfigError(f"Series length must be positive, got {n}")
    rng = np.random.default_rng(seed)

    gamma = fgn_autocovariance(noise, np.arange(n + 1))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    m = row.size
    eigenvalues = np.fft.fft(row).real

    floor = -EMBEDDING_TOLERANCE * np.max(np.abs(eigenvalues))
    if eigenvalues.min() < floor:
        message = (f"Circulant embedding has negative eigenvalue {eigenvalues.min():.3e} "
                   f"for H={noise.hurst}, n={n}")
        if strict:
            raise EmbeddingError(message)
        logger.warning(f"{message}; clipping at zero")
    eigenvalues = np.clip(eigenvalues, 0.0, None)

    count = 1 if size is None else int(size)
    z = rng.standard_normal((count, m)) + 1j * rng.standard_normal((count, m))
    samples = np.fft.fft(np.sqrt(eigenvalues / m) * z, axis=1).real[:, :n]

    return samples[0] if size is None else samples


def build_factor_matrix(p: int, k: int, seed) -> np.ndarray:
    """Binary loadings: first column all ones, column j holds floor((1-(j-1)/k) p) ones"""
    if k < 1 or p < 1:
        raise ConfigError(f"p and k must be positive, got p={p}, k={k}")
    if k > p:
        raise ConfigError(f"Number of trends k={k} cannot exceed p={p}")

    rng = np.random.default_rng(seed)
    # integer arithmetic keeps the counts exact
    counts = [((k - j) * p) // k for j in range(k)]

    for attempt in range(MAX_PLACEMENT_RETRIES):
        B = np.zeros((p, k))
        B[:, 0] = 1.0
        for j in range(1, k):
            B[rng.choice(p, size=counts[j], replace=False), j] = 1.0
        if np.linalg.matrix_rank(B) == k:
            if attempt:
                logger.debug(f"Factor matrix placement succeeded after {attempt + 1} attempts")
            return B

    raise ConfigError(
        f"Could not place linearly independent loadings for p={p}, k={k} "
        f"after {MAX_PLACEMENT_RETRIES} attempts"
    )


def default_trends(rng: np.random.Generator, k: int = 5, amplitude: float = 1.0,
                   periods: Sequence[int] = PRESET_TREND_PERIODS) -> Tuple[TrendSpec, ...]:
    """Preset sinusoids with random phase offsets"""
    if k > len(periods):
        raise ConfigError(f"Only {len(periods)} trend periods available, requested k={k}")
    phases = rng.uniform(0.0, 2 * math.pi, size=k)
    return tuple(
        TrendSpec(period=int(periods[j]), amplitude=amplitude, phase_offset=float(phases[j]) % (2 * math.pi))
        for j in range(k)
    )


def generate_trends(trends: Sequence[TrendSpec], T: int) -> np.ndarray:
    """k x T matrix with rows amplitude * sin(2 pi t / period + phase)"""
    if T < 1:
        raise ConfigError(f"Series length must be positive, got {T}")
    t = np.arange(T)
    if not trends:
        return np.zeros((0, T))
    return np.vstack([
        trend.amplitude * np.sin(2 * math.pi * t / trend.period + trend.phase_offset)
        for trend in trends
    ])


def build_factor_model(p: int, k: int = 5, noise: Optional[NoiseSpec] = None, seed=0,
                       amplitude: float = 1.0,
                       periods: Sequence[int] = PRESET_TREND_PERIODS) -> FactorModel:
    """Loadings plus randomly phased preset trends, both derived from one seed"""
    loadings_seq, phase_seq = seed_sequence(seed).spawn(2)
    loadings = build_factor_matrix(p, k, loadings_seq)
    trends = default_trends(np.random.default_rng(phase_seq), k=k, amplitude=amplitude, periods=periods)
    return FactorModel(loadings=loadings, trends=trends, noise=noise or NoiseSpec())


def sparse_streams(p: int, beta: float) -> Tuple[int, ...]:
    """First floor(p^(1-beta)) streams, at least one"""
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"Sparsity exponent must lie in (0, 1], got {beta}")
    count = int(math.floor(p ** (1.0 - beta) + 1e-9))
    return tuple(range(max(1, min(count, p))))


def default_preset(snr: float = 7.0, duration_hours: float = 6.0, seed=0, p: int = 100, k: int = 5,
                   hurst: float = 0.9, variance: float = 1.0, amplitude: float = 1.0,
                   streams: Optional[Sequence[int]] = None, weeks: int = 5,
                   tick_minutes: float = 2.0, T: Optional[int] = None,
                   start_tick: Optional[int] = None) -> Tuple[FactorModel, AnomalySpec, int]:
    """Five weeks of 2-minute ticks with the anomaly at the start of week four

    T and start_tick override the week-based horizon and anomaly onset.
    """
    ticks_per_week = int(round(7 * 24 * 60 / tick_minutes))
    if T is None:
        T = weeks * ticks_per_week
    if start_tick is None:
        start_tick = 3 * ticks_per_week
    model = build_factor_model(p, k, NoiseSpec(hurst, variance), seed=seed, amplitude=amplitude)
    spec = AnomalySpec(
        snr=snr,
        duration_ticks=int(round(duration_hours * 60 / tick_minutes)),
        start_tick=start_tick,
        streams=tuple(streams) if streams is not None else (0, 1, 2),
    )
    return model, spec, T


def synthesize_background(model: FactorModel, T: int, seed) -> np.ndarray:
    """Anomaly-free traffic B f_t + eps_t with mutually independent noise streams"""
    noise = generate_fgn(model.noise, T, seed, size=model.p)
    return model.loadings @ generate_trends(model.trends, T) + noise


def synthesize_dataset(model: FactorModel, spec: AnomalySpec, T: int, seed,
                       warmup_len: int = 10080, tick_minutes: float = 2.0) -> LabeledDataset:
    """x_t = B f_t + u_t + eps_t with u scaled by each stream's warm-up standard deviation"""
    spec.validate_against(model.p, T)

    background = synthesize_background(model, T, seed)

    window = background[:, :max(2, min(warmup_len, T))]
    stds = window.std(axis=1, ddof=1) if window.shape[1] > 1 else np.zeros(model.p)

    streams = list(spec.streams)
    amplitudes = np.zeros(model.p)
    amplitudes[streams] = spec.snr * stds[streams]

    mask = np.zeros((model.p, T), dtype=bool)
    mask[streams, spec.start_tick:spec.start_tick + spec.duration_ticks] = True

    data = background + amplitudes[:, None] * mask
    logger.info(
        f"Synthesized {model.p}x{T} dataset: snr={spec.snr}, duration={spec.duration_ticks} ticks, "
        f"streams={spec.streams}"
    )
    return LabeledDataset(
        data=data,
        mask=mask,
        model=model,
        spec=spec,
        amplitudes=amplitudes,
        background=background,
        tick_minutes=tick_minutes,
    )


def incoherence_check(B: np.ndarray) -> Tuple[float, float]:
    """Smallest eigenvalue of B'B and the largest absolute loading"""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.size == 0:
        raise ConfigError("Loadings matrix is empty")
    lambda_min = float(np.linalg.eigvalsh(B.T @ B)[0])
    return max(lambda_min, 0.0), float(np.max(np.abs(B)))


def main():
    """Print a summary of the default synthetic protocol"""
    logging.basicConfig(level=logging.INFO)
    model, spec, T = default_preset(seed=1)
    dataset = synthesize_dataset(model, spec, T, seed=1)
    lambda_min, max_entry = incoherence_check(model.loadings)

    print(f"Data shape: {dataset.data.shape}")
    print(f"Ones per loading column: {model.loadings.sum(axis=0).astype(int).tolist()}")
    print(f"lambda_min(B'B) = {lambda_min:.3f}, max |B| = {max_entry:.1f}")
    print(f"Anomaly amplitudes: {dataset.amplitudes[list(spec.streams)].round(3).tolist()}")


if __name__ == "__main__":
    main()
