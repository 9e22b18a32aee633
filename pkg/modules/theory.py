"""
Theory Module for the Telescope Anomaly Toolkit
Monte Carlo checks of support recovery, EWMA variance consistency and residual fidelity
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import linalg, signal
from scipy.stats import norm
from tqdm import tqdm

from .errors import ConfigError
from .subspace import top_eigenspace
from .synthgen import (NoiseSpec, build_factor_model, generate_fgn, generate_trends, incoherence_check,
                       seed_sequence)

logger = logging.getLogger(__name__)

CORRELATION_KINDS = ('iid', 'ar1', 'fgn')
CONSISTENCY_BATCH = 10


def alpha_inv_log(p: int) -> float:
    return 1.0 / math.log(p)


def alpha_inv_log_sq(p: int) -> float:
    return 1.0 / math.log(p) ** 2


ALPHA_RULES: Dict[str, Callable[[int], float]] = {
    'inv_log': alpha_inv_log,
    'inv_log_sq': alpha_inv_log_sq,
}


def resolve_alpha_rule(rule: Union[str, Callable[[int], float]]) -> Callable[[int], float]:
    if callable(rule):
        return rule
    if rule not in ALPHA_RULES:
        raise ConfigError(f"Unknown alpha rule '{rule}'; choose one of {sorted(ALPHA_RULES)}")
    return ALPHA_RULES[rule]


@dataclass(frozen=True)
class SparseSignalSpec:
    """Sparse mean shift with support size floor(p^(1-beta)) and amplitude sqrt(2 r ln p)"""
    p: int
    beta: float
    r: float

    def __post_init__(self):
        if self.p < 2:
            raise ConfigError(f"p must be at least 2, got {self.p}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.r <= 0.0:
            raise ConfigError(f"r must be positive, got {self.r}")
        if self.support_size < 1:
            raise ConfigError(f"Empty support for p={self.p}, beta={self.beta}")

    @property
    def support_size(self) -> int:
        return int(math.floor(self.p ** (1.0 - self.beta) + 1e-9))

    @property
    def amplitude(self) -> float:
        return math.sqrt(2.0 * self.r * math.log(self.p))


@dataclass(frozen=True)
class CorrelationSpec:
    """Zero-mean unit-variance Gaussian series: iid, AR(1) with coefficient phi, or fGn with Hurst H"""
    kind: str = 'iid'
    phi: float = 0.0
    hurst: float = 0.5

    def __post_init__(self):
        if self.kind not in CORRELATION_KINDS:
            raise ConfigError(f"Unknown correlation kind '{self.kind}'; choose one of {CORRELATION_KINDS}")
        if self.kind == 'fgn' and not 0.0 < self.hurst < 1.0:
            raise ConfigError(f"Hurst parameter must lie in (0, 1), got {self.hurst}")

    @property
    def square_summable(self) -> bool:
        if self.kind == 'ar1':
            return abs(self.phi) < 1.0
        if self.kind == 'fgn':
            return self.hurst < 0.75
        return True

    def require_square_summable(self) -> None:
        if self.kind == 'ar1' and not self.square_summable:
            raise ConfigError(f"AR(1) with |phi| = {abs(self.phi)} >= 1 is not stationary; "
                              f"its correlations are not square-summable")
        if self.kind == 'fgn' and not self.square_summable:
            raise ConfigError(f"fGn with H = {self.hurst} >= 3/4 has correlations decaying like "
                              f"t^(2H-2), which are not square-summable")

    def simulate(self, n: int, size: int, seed) -> np.ndarray:
        """size x n matrix of independent series"""
        rng = np.random.default_rng(seed)
        if self.kind == 'iid':
            return rng.standard_normal((size, n))
        if self.kind == 'ar1':
            if abs(self.phi) >= 1.0:
                raise ConfigError(f"AR(1) needs |phi| < 1 for a stationary simulation, got {self.phi}")
            shocks = rng.standard_normal((size, n))
            shocks[:, 1:] *= math.sqrt(1.0 - self.phi ** 2)
            return signal.lfilter([1.0], [1.0, -self.phi], shocks, axis=1)
        return generate_fgn(NoiseSpec(hurst=self.hurst, variance=1.0), n, rng, size=size)


@dataclass(frozen=True)
class PhaseCell:
    p: int
    beta: float
    r: float
    n_trials: int
    exact_recovery_rate: float

    @property
    def std_error(self) -> float:
        rate = self.exact_recovery_rate
        return math.sqrt(rate * (1.0 - rate) / self.n_trials)


def recovery_boundary(beta: float) -> float:
    """g(beta) = (1 + sqrt(1 - beta))^2"""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return (1.0 + math.sqrt(1.0 - beta)) ** 2


def threshold_tp(p: int, alpha_of_p: float) -> float:
    """Upper standard-normal quantile at alpha(p)/p"""
    tail = alpha_of_p / p
    if not 0.0 < tail < 1.0:
        raise ConfigError(f"alpha(p)/p must lie in (0, 1), got {tail}")
    return float(norm.isf(tail))


def support_estimator(x: np.ndarray, t_p: float) -> frozenset:
    return frozenset(np.flatnonzero(np.asarray(x) > t_p).tolist())


def phase_transition_experiment(p_list: Sequence[int], beta: float, r_list: Sequence[float],
                                n_trials: int = 200, seed=0,
                                alpha_rule: Union[str, Callable[[int], float]] = 'inv_log_sq',
                                noise: Optional[CorrelationSpec] = None,
                                progress: bool = True) -> List[PhaseCell]:
    """Exact support recovery rate of the thresholding estimator on every (p, r) cell.

    Dependent noise (``noise`` other than iid) is exploratory: the recovery
    boundary is only established for independent standard Gaussian errors.
    """
    rule = resolve_alpha_rule(alpha_rule)
    if noise is not None and noise.kind != 'iid':
        logger.warning(f"Phase experiment with {noise.kind} errors is exploratory")

    cells = list(itertools.product(p_list, r_list))
    results = []
    for (p, r), cell_seed in tqdm(list(zip(cells, seed_sequence(seed).spawn(len(cells)))),
                                  desc="phase diagram", disable=not progress):
        spec = SparseSignalSpec(p=p, beta=beta, r=r)
        t_p = threshold_tp(p, rule(p))
        support_seq, noise_seq = cell_seed.spawn(2)
        rng = np.random.default_rng(support_seq)

        truth = np.zeros((n_trials, p), dtype=bool)
        for trial in range(n_trials):
            truth[trial, rng.choice(p, size=spec.support_size, replace=False)] = True

        if noise is None or noise.kind == 'iid':
            errors = np.random.default_rng(noise_seq).standard_normal((n_trials, p))
        else:
            errors = noise.simulate(p, n_trials, noise_seq)

        x = spec.amplitude * truth + errors
        exact = np.all((x > t_p) == truth, axis=1)
        cell = PhaseCell(p=p, beta=beta, r=r, n_trials=n_trials, exact_recovery_rate=float(exact.mean()))
        logger.debug(f"p={p}, r={r}: t_p={t_p:.4f}, recovery {cell.exact_recovery_rate:.3f}")
        results.append(cell)

    logger.info(f"Phase diagram: {len(results)} cells, beta={beta}, g(beta)={recovery_boundary(beta):.4f}")
    return results


def ewma_variance_path(r: np.ndarray, memory: float, sigma2_init: float = 0.0) -> np.ndarray:
    """sigma2_t = (1 - memory) sigma2_{t-1} + memory r_t^2 along the last axis"""
    if not 0.0 < memory < 1.0:
        raise ConfigError(f"EWMA memory must lie in (0, 1), got {memory}")
    squares = np.asarray(r, dtype=float) ** 2
    initial = np.full(squares.shape[:-1] + (1,), (1.0 - memory) * sigma2_init)
    path, _ = signal.lfilter([memory], [1.0, -(1.0 - memory)], squares, axis=-1, zi=initial)
    return path


@dataclass(frozen=True)
class ConsistencyRow:
    lambda_: float
    bias: float
    variance: float


def ewma_variance_consistency_experiment(corr: CorrelationSpec, lambda_list: Sequence[float],
                                         n: int = 100000, n_reps: int = 100, seed=0,
                                         sigma2_init: float = 0.0,
                                         progress: bool = True) -> List[ConsistencyRow]:
    """Bias and spread across replications of the terminal EWMA variance estimate"""
    corr.require_square_summable()
    if n_reps < 2:
        raise ConfigError(f"Need at least two replications, got {n_reps}")

    terminal = np.zeros((len(lambda_list), n_reps))
    batches = range(0, n_reps, CONSISTENCY_BATCH)
    batch_seeds = seed_sequence(seed).spawn(len(batches))
    for start, batch_seed in tqdm(list(zip(batches, batch_seeds)), desc="ewma consistency",
                                  disable=not progress):
        size = min(CONSISTENCY_BATCH, n_reps - start)
        series = corr.simulate(n, size, batch_seed)
        for i, memory in enumerate(lambda_list):
            terminal[i, start:start + size] = ewma_variance_path(series, memory, sigma2_init)[:, -1]

    rows = [
        ConsistencyRow(lambda_=float(memory), bias=float(terminal[i].mean() - 1.0),
                       variance=float(terminal[i].var(ddof=1)))
        for i, memory in enumerate(lambda_list)
    ]
    for row in rows:
        logger.info(f"{corr.kind}: lambda={row.lambda_:g} bias={row.bias:+.5f} variance={row.variance:.3e}")
    return rows


def residual_gap(basis: np.ndarray, observations: np.ndarray, innovations: np.ndarray) -> float:
    """Mean of (r - (eps + u))^2 with r the projection of the observations off span(basis)"""
    observations = np.asarray(observations, dtype=float)
    basis = np.asarray(basis, dtype=float)
    residuals = observations - basis @ (basis.T @ observations)
    return float(np.mean((residuals - innovations) ** 2))


def resilience_bound(sigma_error: float, k: int, p: int, c_f: float, C: float, phi: float,
                     trace_u: float, norm_u: float) -> float:
    """Per-coordinate bound on the expected squared gap between residual and innovation"""
    if phi <= 0.0:
        raise ConfigError(f"lambda_min(B'B) must be positive, got {phi}")
    first = sigma_error * 2.0 * math.sqrt(k * p) / phi * (c_f * C * k + 1.0 + math.sqrt(trace_u / p))
    second = math.sqrt(k) * C / phi * (1.0 + math.sqrt(k * p) * C * math.sqrt(norm_u))
    return (first + second) ** 2


@dataclass(frozen=True)
class FidelityRow:
    p: int
    gap: float
    bound: float
    lambda_min: float


def residual_fidelity_experiment(p_list: Sequence[int], k: int = 5, n: int = 10080, snr: float = 7.0,
                                 seed=0, n_test: int = 1000, n_streams: int = 3,
                                 hurst: float = 0.9, amplitude: float = 1.0) -> List[FidelityRow]:
    """How closely residuals track eps + u when the subspace is estimated from n clean samples.

    The factors are whitened by their empirical second moment so the loadings,
    factor bound and eigenvalue floor match a model with identity factor covariance.
    """
    rows = []
    for p, p_seed in zip(p_list, seed_sequence(seed).spawn(len(p_list))):
        model_seed, noise_seed = p_seed.spawn(2)
        model = build_factor_model(p, k, NoiseSpec(hurst=hurst), seed=model_seed, amplitude=amplitude)
        total = n + n_test
        factors = generate_trends(model.trends, total)
        noise = generate_fgn(model.noise, total, noise_seed, size=p)
        clean = model.loadings @ factors + noise

        window = clean[:, :n]
        sigma_hat = window @ window.T / n
        basis, _ = top_eigenspace(sigma_hat, k)

        shift = np.zeros(p)
        streams = list(range(min(n_streams, p)))
        shift[streams] = snr * window[streams].std(axis=1, ddof=1)
        observations = clean[:, n:] + shift[:, None]
        innovations = noise[:, n:] + shift[:, None]
        gap = residual_gap(basis, observations, innovations)

        moment = factors[:, :n] @ factors[:, :n].T / n
        chol = linalg.cholesky(moment, lower=True)
        loadings = model.loadings @ chol
        whitened = linalg.solve_triangular(chol, factors, lower=True)
        lambda_min, C = incoherence_check(loadings)
        c_f = float(np.max(np.linalg.norm(whitened, axis=0)) / math.sqrt(k))
        sigma_error = float(np.linalg.norm(sigma_hat - loadings @ loadings.T, 2))
        trace_u = float(shift @ shift)
        bound = resilience_bound(sigma_error, k, p, c_f, C, lambda_min, trace_u, trace_u)

        row = FidelityRow(p=p, gap=gap, bound=bound, lambda_min=incoherence_check(model.loadings)[0])
        logger.info(f"p={p}: gap={gap:.4e}, bound={bound:.4e}, lambda_min={row.lambda_min:.3f}")
        rows.append(row)
    return rows


def main():
    """Print the support recovery rates on both sides of the boundary"""
    logging.basicConfig(level=logging.INFO)
    beta = 0.75
    g = recovery_boundary(beta)
    for cell in phase_transition_experiment([500], beta, [0.25 * g, g, 4.0 * g], n_trials=100):
        print(f"p={cell.p} r={cell.r:.4f}: exact recovery {cell.exact_recovery_rate:.2f}")


if __name__ == "__main__":
    main()
