"""
Detector Module for the Telescope Anomaly Toolkit
Streaming identification of sparse anomalies: EWMA mean/variance tracking around an iPCA residual
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from dotenv import dotenv_values

from .errors import ConfigError, DataError
from .subspace import SubspaceEstimate, batch_pca, ipca_update, project_residual

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12

# (R, L) pairs already reported, so grid searches warn once per pair
_WARNED_GUARDS = set()


@dataclass(frozen=True)
class DetectorConfig:
    """Tuning parameters of the streaming detector.

    Defaults are the recommended setting for strong (snr=7), long (6 h)
    anomalies, with the iPCA memory that tracks the synthetic trends best.
    """
    lambda_: float = 1e-4
    lambda_mu: float = 1e-2
    lambda_sigma: float = 1e-4
    eta: float = 1e-5
    control_limit: float = 7.0
    reg_guard: float = 3.0
    var_fraction: float = 0.9
    warmup_len: int = 10080
    n_components: Optional[int] = None
    variance_floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        for name in ('lambda_', 'lambda_mu', 'lambda_sigma', 'eta'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.control_limit < 0.0:
            raise ConfigError(f"control_limit must be non-negative, got {self.control_limit}")
        if self.reg_guard <= 0.0:
            raise ConfigError(f"reg_guard must be positive, got {self.reg_guard}")
        if not 0.0 < self.var_fraction <= 1.0:
            raise ConfigError(f"var_fraction must lie in (0, 1], got {self.var_fraction}")
        if self.warmup_len < 2:
            raise ConfigError(f"warmup_len must be at least 2, got {self.warmup_len}")
        if self.n_components is not None and self.n_components < 0:
            raise ConfigError(f"n_components must be non-negative, got {self.n_components}")
        if self.variance_floor <= 0.0:
            raise ConfigError(f"variance_floor must be positive, got {self.variance_floor}")
        if self.reg_guard <= self.control_limit and (self.reg_guard, self.control_limit) not in _WARNED_GUARDS:
            _WARNED_GUARDS.add((self.reg_guard, self.control_limit))
            logger.warning(
                f"reg_guard={self.reg_guard} <= control_limit={self.control_limit}: residual "
                f"statistics freeze on streams before they alert"
            )

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> 'DetectorConfig':
        """Build a config from string values keyed by field name ('lambda' is accepted for lambda_)"""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        parsed = {}
        for key, raw in values.items():
            name = 'lambda_' if key == 'lambda' else key
            if name not in fields:
                raise ConfigError(f"Unknown detector config key: {key}")
            if raw is None or str(raw).strip() == '':
                raise ConfigError(f"Missing value for detector config key: {key}")
            text = str(raw).strip()
            try:
                if name in ('warmup_len', 'n_components'):
                    parsed[name] = None if text.lower() == 'none' else int(text)
                else:
                    parsed[name] = float(text)
            except ValueError:
                raise ConfigError(f"Invalid value for {key}: {text!r}")
        return cls(**parsed)

    @classmethod
    def from_file(cls, path: str) -> 'DetectorConfig':
        """Read flat ``key = value`` pairs"""
        if not os.path.exists(path):
            raise ConfigError(f"Detector config file not found: {path}")
        return cls.from_dict(dotenv_values(path))

    def to_file(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            for key, value in self.to_dict().items():
                handle.write(f"{'lambda' if key == 'lambda_' else key} = {value}\n")


@dataclass
class DetectorState:
    """Sequential estimates carried from tick to tick"""
    nu_x: np.ndarray
    nu_r: np.ndarray
    sigma2_r: np.ndarray
    subspace: SubspaceEstimate
    last_alerts: FrozenSet[int] = frozenset()
    tick: int = 0

    @property
    def p(self) -> int:
        return self.nu_x.size

    def copy(self) -> 'DetectorState':
        return DetectorState(
            nu_x=self.nu_x.copy(),
            nu_r=self.nu_r.copy(),
            sigma2_r=self.sigma2_r.copy(),
            subspace=self.subspace,
            last_alerts=frozenset(self.last_alerts),
            tick=self.tick,
        )


@dataclass(frozen=True)
class AlertRecord:
    tick: int
    stream: int
    residual: float
    centered_abs: float
    threshold: float


@dataclass
class AlertMatrix:
    """Sparse (tick, stream) alerts over the evaluated window [start_tick, T)"""
    records: List[AlertRecord]
    p: int
    T: int
    start_tick: int = 0

    def __post_init__(self):
        seen = set()
        for record in self.records:
            key = (record.tick, record.stream)
            if key in seen:
                raise DataError(f"Duplicate alert at tick {record.tick}, stream {record.stream}")
            if not (self.start_tick <= record.tick < self.T and 0 <= record.stream < self.p):
                raise DataError(f"Alert {key} outside {self.p} streams x [{self.start_tick}, {self.T})")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.records)

    def to_dense(self) -> np.ndarray:
        """p x (T - start_tick) boolean alert matrix"""
        dense = np.zeros((self.p, self.T - self.start_tick), dtype=bool)
        for record in self.records:
            dense[record.stream, record.tick - self.start_tick] = True
        return dense


@dataclass
class StreamResult:
    alerts: AlertMatrix
    residuals: np.ndarray
    state: DetectorState
    rejected_ticks: List[int] = field(default_factory=list)
    # max_i |r - nu_r| / sigma per tick; a tick alerts iff its score exceeds L
    scores: Optional[np.ndarray] = None


def ewma(old, obs, memory: float):
    """(1 - memory) * old + memory * obs"""
    return (1.0 - memory) * old + memory * obs


def init_from_warmup(X_warmup: np.ndarray, config: DetectorConfig) -> DetectorState:
    """Batch PCA on the warm-up window and residual statistics of its projections"""
    X = np.asarray(X_warmup, dtype=float)
    if X.ndim != 2 or X.shape[1] != config.warmup_len:
        raise ConfigError(
            f"Warm-up must have {config.warmup_len} columns, got shape {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise DataError("Warm-up window contains NaN or infinite values")

    subspace = batch_pca(X, config.var_fraction, config.n_components)
    nu_x = X.mean(axis=1)
    centered = X - nu_x[:, None]
    residuals = centered - subspace.basis @ (subspace.basis.T @ centered)

    nu_r = residuals.mean(axis=1)
    sigma2_r = residuals.var(axis=1)
    floored = sigma2_r < config.variance_floor
    if np.any(floored):
        logger.warning(
            f"{int(floored.sum())} stream(s) have zero residual variance in the warm-up; "
            f"flooring at {config.variance_floor}"
        )
        sigma2_r = np.maximum(sigma2_r, config.variance_floor)

    logger.info(f"Detector initialized on {X.shape[1]} warm-up ticks: p={X.shape[0]}, k={subspace.k}")
    return DetectorState(nu_x=nu_x, nu_r=nu_r, sigma2_r=sigma2_r, subspace=subspace,
                         last_alerts=frozenset(), tick=X.shape[1])


def step(state: DetectorState, x: np.ndarray, config: DetectorConfig,
         inplace: bool = False) -> Tuple[DetectorState, np.ndarray, FrozenSet[int]]:
    """Process one observation vector.

    Raises ``DataError`` for NaN/Inf entries, leaving ``state`` untouched.
    With ``inplace=True`` the state arrays are updated without a copy.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (state.p,):
        raise DataError(f"Tick {state.tick}: expected {state.p} values, got shape {x.shape}")
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise DataError(f"Tick {state.tick}: non-finite values in streams {bad.tolist()}")

    new = state if inplace else state.copy()

    # mean update, frozen on streams alerting at the previous tick
    if new.last_alerts:
        free = np.ones(new.p, dtype=bool)
        free[list(new.last_alerts)] = False
        new.nu_x[free] = ewma(new.nu_x[free], x[free], config.lambda_)
    else:
        new.nu_x[:] = ewma(new.nu_x, x, config.lambda_)

    residual = project_residual(x, new.nu_x, new.subspace)
    new.subspace = ipca_update(new.subspace, x, new.nu_x, config.eta)

    guard = config.reg_guard * np.sqrt(new.sigma2_r)
    mean_ok = np.abs(residual) < guard
    new.nu_r[mean_ok] = ewma(new.nu_r[mean_ok], residual[mean_ok], config.lambda_mu)

    deviation = np.abs(residual - new.nu_r)
    var_ok = deviation < guard
    new.sigma2_r[var_ok] = np.maximum(
        ewma(new.sigma2_r[var_ok], deviation[var_ok] ** 2, config.lambda_sigma),
        config.variance_floor,
    )

    alerts = frozenset(np.flatnonzero(deviation > config.control_limit * np.sqrt(new.sigma2_r)).tolist())
    new.last_alerts = alerts
    new.tick += 1
    return new, residual, alerts


def continue_stream(state: DetectorState, X: np.ndarray, config: DetectorConfig,
                    copy_state: bool = True) -> StreamResult:
    """Step through every column of X starting from ``state``"""
    X = np.asarray(X, dtype=float)
    current = state.copy() if copy_state else state
    start = current.tick
    residuals = np.full(X.shape, np.nan)
    scores = np.full(X.shape[1], np.nan)
    records: List[AlertRecord] = []
    rejected: List[int] = []

    for offset in range(X.shape[1]):
        try:
            current, residual, alerts = step(current, X[:, offset], config, inplace=True)
        except DataError as e:
            logger.error(f"Skipping tick: {e}")
            rejected.append(current.tick)
            current.tick += 1
            continue
        residuals[:, offset] = residual
        scores[offset] = np.max(np.abs(residual - current.nu_r) / np.sqrt(current.sigma2_r))
        if alerts:
            sigma = np.sqrt(current.sigma2_r)
            for j in sorted(alerts):
                records.append(AlertRecord(
                    tick=start + offset,
                    stream=j,
                    residual=float(residual[j]),
                    centered_abs=float(abs(residual[j] - current.nu_r[j])),
                    threshold=float(config.control_limit * sigma[j]),
                ))

    if rejected:
        logger.warning(f"Rejected {len(rejected)} tick(s) with missing or invalid values")
    alert_matrix = AlertMatrix(records=records, p=current.p, T=start + X.shape[1], start_tick=start)
    return StreamResult(alerts=alert_matrix, residuals=residuals, state=current, rejected_ticks=rejected,
                        scores=scores)


def run_stream(X: np.ndarray, config: DetectorConfig) -> StreamResult:
    """Warm up on the first n0 columns, then stream through the rest"""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] <= config.warmup_len:
        raise ConfigError(
            f"Stream needs more than {config.warmup_len} ticks, got shape {X.shape}"
        )
    state = init_from_warmup(X[:, :config.warmup_len], config)
    result = continue_stream(state, X[:, config.warmup_len:], config, copy_state=False)
    logger.info(f"Processed {X.shape[1] - config.warmup_len} ticks: {len(result.alerts)} alerts")
    return result


def write_checkpoint(state: DetectorState, path: str) -> None:
    """Flat text layout: p, k, nu_x, nu_r, sigma2_r, basis (column-major), tick,
    then eigenvalues, the number of last alerts and their indices"""
    p, k = state.subspace.basis.shape
    values: List[str] = [str(p), str(k)]
    for block in (state.nu_x, state.nu_r, state.sigma2_r, state.subspace.basis.ravel(order='F')):
        values.extend(f"{v:.17g}" for v in block)
    values.append(str(state.tick))
    values.extend(f"{v:.17g}" for v in state.subspace.eigenvalues)
    alerts = sorted(state.last_alerts)
    values.append(str(len(alerts)))
    values.extend(str(j) for j in alerts)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\n'.join(values) + '\n')


def read_checkpoint(path: str) -> DetectorState:
    with open(path, 'r', encoding='utf-8') as handle:
        tokens = [line.strip() for line in handle if line.strip()]
    try:
        p, k = int(tokens[0]), int(tokens[1])
        position = 2

        def take(count: int) -> np.ndarray:
            nonlocal position
            block = np.array([float(v) for v in tokens[position:position + count]])
            if block.size != count:
                raise DataError(f"Checkpoint {path} is truncated")
            position += count
            return block

        nu_x, nu_r, sigma2_r = take(p), take(p), take(p)
        basis = take(p * k).reshape((p, k), order='F')
        tick = int(tokens[position])
        position += 1
        eigenvalues = np.zeros(k)
        alerts: FrozenSet[int] = frozenset()
        if position < len(tokens):
            eigenvalues = take(k)
            count = int(tokens[position])
            alerts = frozenset(int(v) for v in tokens[position + 1:position + 1 + count])
    except (IndexError, ValueError) as e:
        raise DataError(f"Malformed checkpoint {path}: {e}")

    return DetectorState(nu_x=nu_x, nu_r=nu_r, sigma2_r=sigma2_r,
                         subspace=SubspaceEstimate(basis=basis, eigenvalues=eigenvalues),
                         last_alerts=alerts, tick=tick)


class SparseAnomalyDetector:
    """Streaming detector bundling a configuration with its running state"""

    def __init__(self, config: Optional[DetectorConfig] = None):
        self.config = config or DetectorConfig()
        self.state: Optional[DetectorState] = None

    def fit_warmup(self, X_warmup: np.ndarray) -> 'SparseAnomalyDetector':
        self.state = init_from_warmup(X_warmup, self.config)
        return self

    def update(self, x: np.ndarray) -> FrozenSet[int]:
        """Feed one observation vector and return the streams that alert"""
        if self.state is None:
            raise ConfigError("Detector has no state; call fit_warmup or load_checkpoint first")
        self.state, _, alerts = step(self.state, x, self.config, inplace=True)
        return alerts

    def run(self, X: np.ndarray) -> StreamResult:
        """Stream through X; warms up first unless a state is already present"""
        if self.state is None:
            result = run_stream(X, self.config)
        else:
            result = continue_stream(self.state, X, self.config, copy_state=False)
        self.state = result.state
        return result

    def save_checkpoint(self, path: str) -> None:
        if self.state is None:
            raise ConfigError("Nothing to checkpoint: detector has no state")
        write_checkpoint(self.state, path)
        logger.info(f"Checkpoint written to {path} at tick {self.state.tick}")

    def load_checkpoint(self, path: str) -> 'SparseAnomalyDetector':
        self.state = read_checkpoint(path)
        logger.info(f"Checkpoint restored from {path} at tick {self.state.tick}")
        return self

    def get_stats(self) -> Dict[str, object]:
        if self.state is None:
            return {'status': 'not_initialized'}
        return {
            'status': 'initialized',
            'tick': self.state.tick,
            'p': self.state.p,
            'k': self.state.subspace.k,
            'last_alerts': sorted(self.state.last_alerts),
        }
