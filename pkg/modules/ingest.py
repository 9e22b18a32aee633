"""
Ingest Module for the Telescope Anomaly Toolkit
Reads aggregated per-port time series, writes result tables and run manifests
"""

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .detector import AlertMatrix, AlertRecord
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
ALERT_COLUMNS = ('tick', 'stream', 'residual', 'centered_abs', 'threshold')


@dataclass(frozen=True)
class IngestOptions:
    """How a data CSV is turned into a series matrix"""
    log_transform: bool = False
    stream_selection: Optional[Sequence[str]] = None
    tick_column: str = 't'


@dataclass(frozen=True, eq=False)
class SeriesMatrix:
    values: np.ndarray
    names: List[str]
    ticks: List[str]
    log_transformed: bool = False

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"Series values must be a p x T matrix, got shape {self.values.shape}")
        if len(self.names) != self.values.shape[0] or len(self.ticks) != self.values.shape[1]:
            raise DataError(
                f"{len(self.names)} names and {len(self.ticks)} ticks for a {self.values.shape} matrix"
            )

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values: np.ndarray, names: Optional[Sequence[str]] = None,
                   start_tick: int = 0) -> 'SeriesMatrix':
        values = np.asarray(values, dtype=float)
        names = list(names) if names is not None else [f"port_{j}" for j in range(values.shape[0])]
        ticks = [str(start_tick + t) for t in range(values.shape[1])]
        return cls(values=values, names=names, ticks=ticks)


def _format(value: float) -> str:
    return '' if math.isnan(value) else FLOAT_FORMAT % value


def load_timeseries_csv(path: str, options: Optional[IngestOptions] = None) -> SeriesMatrix:
    """Read a ``t,<name>,...`` CSV into a p x T matrix; empty cells become NaN"""
    options = options or IngestOptions()
    if not os.path.exists(path):
        raise DataError(f"Input file not found: {path}")

    with open(path, 'r', encoding='utf-8', newline='') as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        header = [name.strip() for name in header]
        if options.tick_column not in header:
            raise DataError(f"{path}: tick column '{options.tick_column}' not in header")
        tick_index = header.index(options.tick_column)
        stream_columns = [i for i in range(len(header)) if i != tick_index]

        if options.stream_selection is not None:
            missing = [name for name in options.stream_selection if name not in header]
            if missing:
                raise ConfigError(f"{path}: selected streams not in header: {missing}")
            stream_columns = [header.index(name) for name in options.stream_selection]

        ticks: List[str] = []
        rows: List[List[float]] = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}, line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            values = []
            for i in stream_columns:
                cell = row[i].strip()
                if cell == '':
                    values.append(math.nan)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}, line {reader.line_num}: non-numeric value {cell!r} "
                                    f"in column '{header[i]}'")
                if options.log_transform and value < 0.0:
                    raise DataError(f"{path}, line {reader.line_num}: negative count {value} cannot be "
                                    f"log-transformed (column '{header[i]}')")
                values.append(value)
            ticks.append(row[tick_index].strip())
            rows.append(values)

    values = np.array(rows, dtype=float).reshape(len(rows), len(stream_columns)).T
    if options.log_transform:
        values = np.log1p(values)
    missing = int(np.isnan(values).sum())
    if missing:
        logger.warning(f"{path}: {missing} missing cell(s); the affected ticks will be rejected")
    logger.info(f"Loaded {values.shape[0]} streams x {values.shape[1]} ticks from {path}")
    return SeriesMatrix(values=values, names=[header[i] for i in stream_columns], ticks=ticks,
                        log_transformed=options.log_transform)


def top_k_streams(X: SeriesMatrix, k: int) -> SeriesMatrix:
    """Keep the k streams with the largest total count, in descending order of that total"""
    if not 1 <= k <= X.p:
        raise ConfigError(f"k must lie in [1, {X.p}], got {k}")
    raw = np.expm1(X.values) if X.log_transformed else X.values
    totals = np.nansum(raw, axis=1)
    order = sorted(range(X.p), key=lambda j: (-totals[j], j))[:k]
    return SeriesMatrix(values=X.values[order], names=[X.names[j] for j in order], ticks=list(X.ticks),
                        log_transformed=X.log_transformed)


def write_series_csv(path: str, series: SeriesMatrix, tick_column: str = 't') -> None:
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow([tick_column] + list(series.names))
        for t, tick in enumerate(series.ticks):
            writer.writerow([tick] + [_format(v) for v in series.values[:, t]])


def write_mask_csv(path: str, mask: np.ndarray, names: Optional[Sequence[str]] = None,
                   start_tick: int = 0) -> None:
    """Ground-truth mask in the data CSV layout with 0/1 cells"""
    mask = np.asarray(mask, dtype=bool)
    names = list(names) if names is not None else [f"port_{j}" for j in range(mask.shape[0])]
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['t'] + names)
        for t in range(mask.shape[1]):
            writer.writerow([start_tick + t] + mask[:, t].astype(int).tolist())


def read_mask_csv(path: str) -> np.ndarray:
    series = load_timeseries_csv(path)
    if np.any(np.isnan(series.values)) or np.any((series.values != 0) & (series.values != 1)):
        raise DataError(f"{path}: mask cells must be 0 or 1")
    return series.values.astype(bool)


def write_alerts_csv(path: str, alerts: AlertMatrix) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(ALERT_COLUMNS)
        for record in alerts.records:
            writer.writerow([record.tick, record.stream, _format(record.residual),
                             _format(record.centered_abs), _format(record.threshold)])
    logger.info(f"Wrote {len(alerts)} alerts to {path}")


def read_alerts_csv(path: str, p: int, T: int, start_tick: int = 0) -> AlertMatrix:
    if not os.path.exists(path):
        raise DataError(f"Alerts file not found: {path}")
    records = []
    with open(path, 'r', encoding='utf-8', newline='') as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ALERT_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(ALERT_COLUMNS)}")
        for row in reader:
            try:
                records.append(AlertRecord(
                    tick=int(row['tick']),
                    stream=int(row['stream']),
                    residual=float(row['residual']),
                    centered_abs=float(row['centered_abs']),
                    threshold=float(row['threshold']),
                ))
            except (TypeError, ValueError):
                raise DataError(f"{path}, line {reader.line_num}: malformed alert row")
    return AlertMatrix(records=records, p=p, T=T, start_tick=start_tick)


def write_rows_csv(path: str, rows: Iterable[Any], columns: Optional[Sequence[str]] = None) -> None:
    """Write dataclass instances or dicts as CSV; floats keep 17 significant digits"""
    records = [dataclasses.asdict(row) if dataclasses.is_dataclass(row) else dict(row) for row in rows]
    columns = list(columns) if columns is not None else (list(records[0]) if records else [])
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(columns)
        for record in records:
            writer.writerow([
                _format(record[c]) if isinstance(record[c], float) else record[c] for c in columns
            ])
    logger.info(f"Wrote {len(records)} rows to {path}")


@dataclass
class RunManifest:
    """Reproducibility record written next to the outputs of every invocation"""
    subcommand: str
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = ''
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def write(self, output_dir: str) -> str:
        os.makedirs(output_dir, exist_ok=True)
        path = os.path.join(output_dir, f"{self.subcommand}.manifest.json")
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            json.dump(dataclasses.asdict(self), handle, indent=2, ensure_ascii=False, default=str)
        logger.info(f"Manifest saved to {path}")
        return path

    @classmethod
    def read(cls, path: str) -> 'RunManifest':
        with open(path, 'r', encoding='utf-8') as handle:
            return cls(**json.load(handle))
