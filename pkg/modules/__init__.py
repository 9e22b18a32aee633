"""
Telescope Anomaly Toolkit Modules
Synthetic telescope traffic, streaming sparse-anomaly detection, baselines, evaluation and theory checks
"""

__version__ = "1.0.0"
__author__ = "Telescope Anomaly Team"

from .errors import ConfigError, DataError, EmbeddingError, SubspaceError, TelescopeError
from .synthgen import AnomalySpec, FactorModel, LabeledDataset, NoiseSpec, TrendSpec
from .subspace import SubspaceEstimate, batch_pca, ipca_update, project_residual
from .detector import AlertMatrix, DetectorConfig, DetectorState, SparseAnomalyDetector, run_stream
from .baseline import QDetector, fit_q_detector
from .evalkit import EvalReport, RocCurve, TuningGrid, TuningRecommendation, grid_search_tune, roc_auc
from .theory import CorrelationSpec, PhaseCell, SparseSignalSpec
from .ingest import IngestOptions, RunManifest, SeriesMatrix, load_timeseries_csv

__all__ = [
    'TelescopeError',
    'ConfigError',
    'DataError',
    'EmbeddingError',
    'SubspaceError',
    'NoiseSpec',
    'TrendSpec',
    'FactorModel',
    'AnomalySpec',
    'LabeledDataset',
    'SubspaceEstimate',
    'batch_pca',
    'ipca_update',
    'project_residual',
    'DetectorConfig',
    'DetectorState',
    'AlertMatrix',
    'SparseAnomalyDetector',
    'run_stream',
    'QDetector',
    'fit_q_detector',
    'EvalReport',
    'RocCurve',
    'TuningGrid',
    'TuningRecommendation',
    'grid_search_tune',
    'roc_auc',
    'CorrelationSpec',
    'PhaseCell',
    'SparseSignalSpec',
    'IngestOptions',
    'SeriesMatrix',
    'RunManifest',
    'load_timeseries_csv',
]
