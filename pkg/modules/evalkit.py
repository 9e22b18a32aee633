"""
Evaluation Module for the Telescope Anomaly Toolkit
Detection (rows) and identification (indiv) metrics, ROC/AUC, and the hyper-parameter grid search
"""

import dataclasses
import itertools
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .baseline import fit_q_detector, q_roc_points, q_statistics
from .detector import AlertMatrix, DetectorConfig, run_stream
from .errors import ConfigError, DataError
from .synthgen import (PRESET_TREND_COUNT, LabeledDataset, default_preset, seed_sequence, sparse_streams,
                       synthesize_dataset)

logger = logging.getLogger(__name__)

DEFAULT_CONTROL_LIMITS = (0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 20.0)
DEFAULT_ALPHAS = (1e-12, 1e-9, 1e-6, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.5, 0.8, 0.95, 0.999)

# (snr, duration hours) -> L, R, lambda, lambda_mu, lambda_sigma
RECOMMENDED_SETTINGS: Dict[Tuple[float, float], Dict[str, float]] = {
    (2.0, 1.0): dict(control_limit=5.0, reg_guard=4.0, lambda_=1e-3, lambda_mu=1e-4, lambda_sigma=1e-4),
    (5.0, 1.0): dict(control_limit=7.0, reg_guard=5.0, lambda_=1e-3, lambda_mu=1e-3, lambda_sigma=1e-5),
    (7.0, 1.0): dict(control_limit=7.0, reg_guard=5.0, lambda_=1e-4, lambda_mu=1e-2, lambda_sigma=1e-4),
    (2.0, 6.0): dict(control_limit=5.0, reg_guard=3.0, lambda_=1e-4, lambda_mu=1e-3, lambda_sigma=1e-4),
    (5.0, 6.0): dict(control_limit=7.0, reg_guard=5.0, lambda_=1e-3, lambda_mu=1e-3, lambda_sigma=1e-5),
    (7.0, 6.0): dict(control_limit=7.0, reg_guard=3.0, lambda_=1e-4, lambda_mu=1e-2, lambda_sigma=1e-4),
}


def recommended_config(snr: float, duration_hours: float, **overrides) -> DetectorConfig:
    """Detector config carrying the recommended setting for an (snr, duration) cell.

    The subspace dimension is pinned to the preset trend count; pass
    ``n_components=None`` to fall back to the variance-fraction rule.
    """
    key = (float(snr), float(duration_hours))
    if key not in RECOMMENDED_SETTINGS:
        raise ConfigError(f"No recommended setting for snr={snr}, duration={duration_hours}h; "
                          f"known cells: {sorted(RECOMMENDED_SETTINGS)}")
    return DetectorConfig(**{'n_components': PRESET_TREND_COUNT, **RECOMMENDED_SETTINGS[key], **overrides})


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def tpr(self) -> float:
        positives = self.tp + self.fn
        return self.tp / positives if positives else math.nan

    @property
    def fpr(self) -> float:
        negatives = self.fp + self.tn
        return self.fp / negatives if negatives else math.nan

    @property
    def f1(self) -> float:
        denominator = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denominator if denominator else 0.0


def _counts(predicted: np.ndarray, actual: np.ndarray) -> ConfusionCounts:
    predicted = np.asarray(predicted, dtype=bool)
    actual = np.asarray(actual, dtype=bool)
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def _test_window(alerts: AlertMatrix, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Dense alerts and the mask cropped to the evaluated ticks"""
    mask = np.asarray(mask, dtype=bool)
    n_test = alerts.T - alerts.start_tick
    if mask.ndim != 2 or mask.shape[0] != alerts.p:
        raise DataError(f"Mask shape {mask.shape} does not match {alerts.p} streams")
    if mask.shape[1] == alerts.T:
        mask = mask[:, alerts.start_tick:]
    elif mask.shape[1] != n_test:
        raise DataError(
            f"Mask covers {mask.shape[1]} ticks; expected {alerts.T} (full series) or {n_test} (test window)"
        )
    if n_test == 0:
        raise DataError("Empty test window")
    return alerts.to_dense(), mask


def confusion_rows(alerts: AlertMatrix, mask: np.ndarray) -> Tuple[float, float, ConfusionCounts]:
    """Detection confusion: a tick is positive when any stream is anomalous / alerting"""
    dense, mask = _test_window(alerts, mask)
    counts = _counts(dense.any(axis=0), mask.any(axis=0))
    return counts.tpr, counts.fpr, counts


def confusion_indiv(alerts: AlertMatrix, mask: np.ndarray) -> Tuple[float, float, float, ConfusionCounts]:
    """Identification confusion over every (stream, tick) cell of the test window"""
    dense, mask = _test_window(alerts, mask)
    counts = _counts(dense, mask)
    return counts.tpr, counts.fpr, counts.f1, counts


@dataclass(frozen=True)
class EvalReport:
    """Rows- and indiv-level rates with their confusion counts"""
    tpr_rows: float
    fpr_rows: float
    tpr_indiv: float
    fpr_indiv: float
    f1: float
    f1_rows: float
    rows: ConfusionCounts
    indiv: ConfusionCounts

    @property
    def tpr_undefined(self) -> bool:
        """True when the mask has no anomalous cell, so TPR is NaN"""
        return math.isnan(self.tpr_indiv)

    @classmethod
    def from_dense(cls, alerts: np.ndarray, mask: np.ndarray) -> 'EvalReport':
        alerts = np.asarray(alerts, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if alerts.shape != mask.shape:
            raise DataError(f"Alert matrix {alerts.shape} and mask {mask.shape} differ in shape")
        if alerts.size == 0:
            raise DataError("Empty test window")
        rows = _counts(alerts.any(axis=0), mask.any(axis=0))
        indiv = _counts(alerts, mask)
        if math.isnan(indiv.tpr):
            logger.warning("Mask has no anomalous cells; TPR is undefined")
        return cls(tpr_rows=rows.tpr, fpr_rows=rows.fpr, tpr_indiv=indiv.tpr, fpr_indiv=indiv.fpr,
                   f1=indiv.f1, f1_rows=rows.f1, rows=rows, indiv=indiv)

    @classmethod
    def from_alerts(cls, alerts: AlertMatrix, mask: np.ndarray) -> 'EvalReport':
        dense, mask = _test_window(alerts, mask)
        return cls.from_dense(dense, mask)

    def to_dict(self) -> Dict[str, float]:
        values = {key: getattr(self, key) for key in
                  ('tpr_rows', 'fpr_rows', 'tpr_indiv', 'fpr_indiv', 'f1', 'f1_rows')}
        for level in ('rows', 'indiv'):
            counts = getattr(self, level)
            for name in ('tp', 'fp', 'tn', 'fn'):
                values[f"{name}_{level}"] = getattr(counts, name)
        return values


@dataclass(frozen=True)
class RocCurve:
    """ROC points sorted by fpr, anchored at (0,0) and (1,1)"""
    points: List[Tuple[float, float]]
    params: List[Optional[float]]
    auc: float


def roc_auc(points: Iterable[Tuple[float, float]],
            params: Optional[Sequence[float]] = None) -> RocCurve:
    points = [(float(f), float(t)) for f, t in points]
    if not points:
        raise DataError("ROC needs at least one point")
    params = list(params) if params is not None else [None] * len(points)
    if len(params) != len(points):
        raise DataError(f"Got {len(params)} parameters for {len(points)} ROC points")
    for fpr, tpr in points:
        if not (0.0 <= fpr <= 1.0 and 0.0 <= tpr <= 1.0):
            raise DataError(f"ROC point ({fpr}, {tpr}) outside the unit square")

    best: Dict[float, Tuple[float, Optional[float]]] = {0.0: (0.0, None), 1.0: (1.0, None)}
    for (fpr, tpr), param in zip(points, params):
        if fpr not in best or tpr > best[fpr][0] or (tpr == best[fpr][0] and best[fpr][1] is None):
            best[fpr] = (tpr, param)

    fprs = sorted(best)
    tprs = [best[f][0] for f in fprs]
    auc = float(np.trapezoid(tprs, fprs))
    return RocCurve(points=list(zip(fprs, tprs)), params=[best[f][1] for f in fprs], auc=auc)


@dataclass(frozen=True)
class TuningGrid:
    """Search grids for the tuner; every other detector setting comes from ``base``"""
    lambdas: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    lambda_mus: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    lambda_sigmas: Tuple[float, ...] = (1e-4, 1e-5, 1e-6)
    reg_guards: Tuple[float, ...] = (3.0, 4.0, 5.0)
    control_limits: Tuple[float, ...] = DEFAULT_CONTROL_LIMITS
    base: DetectorConfig = field(default_factory=lambda: DetectorConfig(n_components=PRESET_TREND_COUNT))

    def __post_init__(self):
        for name in ('lambdas', 'lambda_mus', 'lambda_sigmas', 'reg_guards', 'control_limits'):
            if not getattr(self, name):
                raise ConfigError(f"Tuning grid '{name}' is empty")

    def combos(self) -> List[Tuple[float, float, float, float]]:
        """(lambda, lambda_mu, lambda_sigma, R) combinations in grid order"""
        return list(itertools.product(self.lambdas, self.lambda_mus, self.lambda_sigmas, self.reg_guards))

    def config(self, combo: Tuple[float, float, float, float], control_limit: float) -> DetectorConfig:
        lam, lam_mu, lam_sigma, guard = combo
        return dataclasses.replace(self.base, lambda_=lam, lambda_mu=lam_mu, lambda_sigma=lam_sigma,
                                   reg_guard=guard, control_limit=control_limit)


@dataclass(frozen=True)
class TuningRecommendation:
    snr: float
    duration_hours: float
    control_limit: float
    reg_guard: float
    lambda_: float
    lambda_mu: float
    lambda_sigma: float
    auc: float = math.nan
    f1: float = math.nan

    def to_row(self) -> Dict[str, float]:
        return {
            'snr': self.snr,
            'duration': self.duration_hours,
            'L': self.control_limit,
            'REG': self.reg_guard,
            'ewma_data': self.lambda_,
            'ewma_mean': self.lambda_mu,
            'ewma_var': self.lambda_sigma,
        }


_WORKER_DATASETS: List[LabeledDataset] = []


def _init_worker(datasets: List[LabeledDataset]) -> None:
    global _WORKER_DATASETS
    _WORKER_DATASETS = datasets


def _score_job(job: Tuple[int, DetectorConfig]) -> Tuple[float, float, float]:
    """(tpr_indiv, fpr_indiv, f1) of one detector run"""
    index, config = job
    dataset = _WORKER_DATASETS[index]
    result = run_stream(dataset.data, config)
    report = EvalReport.from_alerts(result.alerts, dataset.mask)
    return report.tpr_indiv, report.fpr_indiv, report.f1


def _run_jobs(datasets: List[LabeledDataset], jobs: List[Tuple[int, DetectorConfig]],
              workers: int, progress: bool) -> List[Tuple[float, float, float]]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(datasets,)) as pool:
            return list(tqdm(pool.map(_score_job, jobs, chunksize=4), total=len(jobs),
                             desc="grid search", disable=not progress))
    _init_worker(datasets)
    return [_score_job(job) for job in tqdm(jobs, desc="grid search", disable=not progress)]


def _tune_cell(datasets: List[LabeledDataset], grid: TuningGrid, workers: int,
               progress: bool) -> TuningRecommendation:
    combos = grid.combos()
    jobs = [
        (index, grid.config(combo, limit))
        for combo in combos
        for limit in grid.control_limits
        for index in range(len(datasets))
    ]
    scores = np.array(_run_jobs(datasets, jobs, workers, progress))
    # jobs x 3 -> combos x limits x replications x 3, averaged over replications
    scores = scores.reshape(len(combos), len(grid.control_limits), len(datasets), 3).mean(axis=2)

    aucs = np.array([
        roc_auc([(fpr, tpr) for tpr, fpr, _ in scores[c]]).auc for c in range(len(combos))
    ])
    order = sorted(range(len(combos)), key=lambda c: (-aucs[c], combos[c]))
    best = order[0]

    f1s = scores[best, :, 2]
    limit_index = min(range(len(grid.control_limits)),
                      key=lambda i: (-f1s[i], grid.control_limits[i]))
    lam, lam_mu, lam_sigma, guard = combos[best]
    spec = datasets[0].spec
    recommendation = TuningRecommendation(
        snr=spec.snr,
        duration_hours=datasets[0].duration_hours,
        control_limit=grid.control_limits[limit_index],
        reg_guard=guard,
        lambda_=lam,
        lambda_mu=lam_mu,
        lambda_sigma=lam_sigma,
        auc=float(aucs[best]),
        f1=float(f1s[limit_index]),
    )
    logger.info(f"Tuned cell snr={recommendation.snr}, duration={recommendation.duration_hours}h: "
                f"L={recommendation.control_limit}, R={guard}, lambda={lam}, lambda_mu={lam_mu}, "
                f"lambda_sigma={lam_sigma} (AUC {recommendation.auc:.4f}, F1 {recommendation.f1:.4f})")
    return recommendation


def grid_search_tune(replications: Sequence[LabeledDataset], grid: Optional[TuningGrid] = None,
                     workers: int = 1, progress: bool = True) -> List[TuningRecommendation]:
    """Pick the AUC-maximizing (lambda, lambda_mu, lambda_sigma, R), then its F1-maximizing L.

    Replications are grouped by (snr, duration); metrics are averaged over the
    replications of a cell before any argmax. Ties go to the smaller combination tuple, then the smaller L.
    """
    if not replications:
        raise ConfigError("Grid search needs at least one replication")
    grid = grid or TuningGrid()
    cells: Dict[Tuple[float, float], List[LabeledDataset]] = defaultdict(list)
    for dataset in replications:
        cells[(dataset.spec.snr, dataset.duration_hours)].append(dataset)

    logger.info(f"Tuning {len(cells)} cell(s) over {len(grid.combos())} combinations x "
                f"{len(grid.control_limits)} control limits")
    return [_tune_cell(cells[key], grid, workers, progress) for key in sorted(cells)]


def tune_table(snrs: Sequence[float] = (2.0, 5.0, 7.0), durations_hours: Sequence[float] = (1.0, 6.0),
               n_replications: int = 5, seed=0, grid: Optional[TuningGrid] = None, p: int = 100,
               workers: int = 1, progress: bool = True, **preset) -> List[TuningRecommendation]:
    """Synthesize replications for every (snr, duration) cell and tune each"""
    grid = grid or TuningGrid()
    datasets = []
    cells = list(itertools.product(snrs, durations_hours))
    for (snr, hours), cell_seed in zip(cells, seed_sequence(seed).spawn(len(cells))):
        for rep_seed in cell_seed.spawn(n_replications):
            model_seed, data_seed = rep_seed.spawn(2)
            model, spec, T = default_preset(snr=snr, duration_hours=hours, seed=model_seed, p=p, **preset)
            datasets.append(synthesize_dataset(model, spec, T, data_seed, warmup_len=grid.base.warmup_len,
                                               tick_minutes=preset.get('tick_minutes', 2.0)))
    return grid_search_tune(datasets, grid, workers=workers, progress=progress)


def control_limit_sweep(scores: np.ndarray, n_levels: int = 200,
                        extra: Sequence[float] = ()) -> List[float]:
    """Control limits at evenly spaced quantiles of the per-tick scores, plus 0 and ``extra``.

    The largest level is the maximum score, so the sweep ends with no alerting tick.
    """
    finite = np.asarray(scores, dtype=float)
    finite = finite[np.isfinite(finite)]
    if finite.size == 0:
        raise DataError("No finite detector scores to sweep")
    if n_levels < 2:
        raise ConfigError(f"Need at least 2 sweep levels, got {n_levels}")
    levels = np.quantile(finite, np.linspace(0.0, 1.0, n_levels))
    return sorted({0.0, *map(float, levels), *map(float, extra)})


def score_roc_points(scores: np.ndarray, positive: np.ndarray,
                     control_limits: Sequence[float]) -> List[Tuple[float, float]]:
    """Rows-level (fpr, tpr) per control limit; a tick alerts when its score exceeds the limit"""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    if scores.shape != positive.shape:
        raise DataError(f"Scores of shape {scores.shape} against labels of shape {positive.shape}")
    points = []
    for limit in control_limits:
        counts = _counts(scores > limit, positive)
        points.append((counts.fpr, counts.tpr))
    return points


def _rows_point(dataset: LabeledDataset, config: DetectorConfig) -> Tuple[float, float]:
    report = EvalReport.from_dense(run_stream(dataset.data, config).alerts.to_dense(),
                                   dataset.mask[:, config.warmup_len:])
    return report.fpr_rows, report.tpr_rows


@dataclass(frozen=True)
class ComparisonRow:
    p: int
    seed: int
    auc_ipca: float
    auc_q: float

    @property
    def gap(self) -> float:
        return self.auc_ipca - self.auc_q


def roc_comparison(p_list: Sequence[int] = (100, 500), seeds: Sequence[int] = range(5),
                   snr: float = 2.0, duration_hours: float = 6.0, beta: float = 0.75,
                   config: Optional[DetectorConfig] = None,
                   control_limits: Sequence[float] = DEFAULT_CONTROL_LIMITS,
                   alphas: Sequence[float] = DEFAULT_ALPHAS, n_levels: int = 25, rerun: bool = True,
                   progress: bool = True, **preset) -> List[ComparisonRow]:
    """Rows-level AUC of the streaming detector (L sweep) against the Q test (alpha sweep)

    L sweeps ``control_limits`` plus ``n_levels`` quantiles of the per-tick scores of
    a run at ``config.control_limit``. With ``rerun`` every level gets its own full
    detector run; otherwise the reference scores are thresholded directly.
    """
    if config is None:
        config = recommended_config(snr, duration_hours)
    rows = []
    for p, seed in tqdm(list(itertools.product(p_list, seeds)), desc="roc comparison",
                        disable=not progress):
        model, spec, T = default_preset(snr=snr, duration_hours=duration_hours, seed=seed, p=p,
                                      streams=sparse_streams(p, beta), **preset)
        dataset = synthesize_dataset(model, spec, T, seed, warmup_len=config.warmup_len,
                                     tick_minutes=preset.get('tick_minutes', 2.0))
        positive = dataset.mask[:, config.warmup_len:].any(axis=0)

        reference = run_stream(dataset.data, config)
        limits = control_limit_sweep(reference.scores, n_levels, extra=control_limits)
        if rerun:
            points = [_rows_point(dataset, dataclasses.replace(config, control_limit=limit)) for limit in limits]
        else:
            points = score_roc_points(reference.scores, positive, limits)
        auc_ipca = roc_auc(points, limits).auc

        q = fit_q_detector(dataset.data[:, :config.warmup_len])
        q_points, q_params = q_roc_points(q_statistics(dataset.data, q, config.warmup_len),
                                          positive, q.dof, alphas)
        auc_q = roc_auc(q_points, q_params).auc

        row = ComparisonRow(p=p, seed=int(seed), auc_ipca=auc_ipca, auc_q=auc_q)
        logger.info(f"p={p}, seed={seed}: AUC iPCA {auc_ipca:.4f}, AUC Q {auc_q:.4f}, gap {row.gap:.4f}")
        rows.append(row)
    return rows
