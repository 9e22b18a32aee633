"""
Telescope Anomaly Toolkit - Command Line Application
Generates synthetic telescope traffic, runs the streaming detector and the evaluation experiments
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

import modules
from modules.baseline import DEFAULT_ALPHA, fit_q_detector, q_statistics
from modules.detector import DetectorConfig, SparseAnomalyDetector
from modules.errors import ConfigError, DataError, EmbeddingError, SubspaceError
from modules.evalkit import (DEFAULT_CONTROL_LIMITS, EvalReport, TuningGrid, recommended_config, roc_auc,
                             roc_comparison, tune_table)
from modules.ingest import (IngestOptions, RunManifest, SeriesMatrix, load_timeseries_csv,
                            read_alerts_csv, read_mask_csv, top_k_streams, write_alerts_csv,
                            write_mask_csv, write_rows_csv, write_series_csv)
from modules.subspace import DEFAULT_ETA_GRID, angle_sweep
from modules.synthgen import PRESET_TREND_COUNT, NoiseSpec, default_preset, sparse_streams, synthesize_dataset
from modules.theory import (ALPHA_RULES, CorrelationSpec, ewma_variance_consistency_experiment,
                            phase_transition_experiment, recovery_boundary,
                            residual_fidelity_experiment)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    """Bad command line"""


class ToolkitArgumentParser(argparse.ArgumentParser):
    """Raise instead of exiting so dispatch controls the exit code"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _output_path(args, explicit: Optional[str], default_name: str) -> str:
    if explicit:
        parent = os.path.dirname(explicit)
        if parent:
            os.makedirs(parent, exist_ok=True)
        return explicit
    os.makedirs(args.output_dir, exist_ok=True)
    return os.path.join(args.output_dir, default_name)


def _load_series(args) -> SeriesMatrix:
    options = IngestOptions(log_transform=args.log_transform, stream_selection=args.streams)
    series = load_timeseries_csv(args.input, options)
    if args.top_k:
        series = top_k_streams(series, args.top_k)
    return series


def _detector_config(args) -> DetectorConfig:
    config = DetectorConfig.from_file(args.config) if args.config else DetectorConfig()
    overrides = {}
    if args.warmup is not None:
        overrides['warmup_len'] = args.warmup
    if args.control_limit is not None:
        overrides['control_limit'] = args.control_limit
    if args.n_components is not None:
        overrides['n_components'] = args.n_components
    return dataclasses.replace(config, **overrides) if overrides else config


def cmd_generate(args) -> RunManifest:
    streams = sparse_streams(args.p, args.beta) if args.beta is not None else None
    model, spec, T = default_preset(snr=args.snr, duration_hours=args.duration_hours, seed=args.seed,
                                  p=args.p, k=args.k, hurst=args.hurst, variance=args.variance,
                                  amplitude=args.amplitude, streams=streams, weeks=args.weeks,
                                  tick_minutes=args.tick_minutes, T=args.T, start_tick=args.start)
    dataset = synthesize_dataset(model, spec, T, seed=args.seed + 1, warmup_len=args.warmup,
                                 tick_minutes=args.tick_minutes)

    data_path = _output_path(args, args.data_out, 'data.csv')
    mask_path = _output_path(args, args.mask_out, 'mask.csv')
    series = SeriesMatrix.from_array(dataset.data)
    write_series_csv(data_path, series)
    write_mask_csv(mask_path, dataset.mask, series.names)
    logger.info(f"✅ Generated {dataset.p}x{dataset.T} dataset with anomaly on streams {spec.streams} "
                f"at ticks [{spec.start_tick}, {spec.start_tick + spec.duration_ticks})")

    return RunManifest(
        subcommand='generate',
        config={'snr': args.snr, 'duration_hours': args.duration_hours, 'p': args.p, 'k': args.k,
                'hurst': args.hurst, 'variance': args.variance, 'amplitude': args.amplitude,
                'weeks': args.weeks, 'T': T, 'start': spec.start_tick,
                'tick_minutes': args.tick_minutes, 'warmup': args.warmup, 'beta': args.beta,
                'streams': list(spec.streams)},
        seed=args.seed,
        outputs={'data': data_path, 'mask': mask_path},
    )


def cmd_detect(args) -> RunManifest:
    config = _detector_config(args)
    series = _load_series(args)
    detector = SparseAnomalyDetector(config)
    if args.resume_from:
        detector.load_checkpoint(args.resume_from)
        if detector.state.p != series.p:
            raise DataError(f"Checkpoint tracks {detector.state.p} streams, input has {series.p}")
    result = detector.run(series.values)

    alerts_path = _output_path(args, args.alerts_out, 'alerts.csv')
    write_alerts_csv(alerts_path, result.alerts)
    outputs = {'alerts': alerts_path}
    if args.residuals_out:
        offset = series.T - result.residuals.shape[1]
        residuals = SeriesMatrix(values=result.residuals, names=series.names, ticks=series.ticks[offset:])
        write_series_csv(args.residuals_out, residuals)
        outputs['residuals'] = args.residuals_out
    if args.checkpoint:
        detector.save_checkpoint(args.checkpoint)
        outputs['checkpoint'] = args.checkpoint
    if result.rejected_ticks:
        logger.warning(f"⚠️  {len(result.rejected_ticks)} tick(s) rejected: {result.rejected_ticks[:10]}")

    inputs = {'data': args.input}
    if args.config:
        inputs['config'] = args.config
    if args.resume_from:
        inputs['checkpoint'] = args.resume_from
    return RunManifest(subcommand='detect', config=config.to_dict(), inputs=inputs, outputs=outputs)


def cmd_tune(args) -> RunManifest:
    base = DetectorConfig(eta=args.eta, n_components=args.n_components, warmup_len=args.warmup)
    grid = TuningGrid(
        lambdas=tuple(args.lambdas),
        lambda_mus=tuple(args.lambda_mus),
        lambda_sigmas=tuple(args.lambda_sigmas),
        reg_guards=tuple(args.reg_guards),
        control_limits=tuple(args.control_limits),
        base=base,
    )
    recommendations = tune_table(snrs=args.snrs, durations_hours=args.durations, n_replications=args.replications,
                                 seed=args.seed, grid=grid, p=args.p, workers=args.workers,
                                 progress=args.progress, weeks=args.weeks, tick_minutes=args.tick_minutes)
    out = _output_path(args, args.out, 'table.csv')
    write_rows_csv(out, [r.to_row() for r in recommendations],
                   ['snr', 'duration', 'L', 'REG', 'ewma_data', 'ewma_mean', 'ewma_var'])
    return RunManifest(subcommand='tune', config={'grid': dataclasses.asdict(grid), 'snrs': args.snrs,
                                                  'durations': args.durations, 'p': args.p,
                                                  'replications': args.replications},
                       seed=args.seed, outputs={'table': out})


def cmd_evaluate(args) -> RunManifest:
    mask = read_mask_csv(args.mask)
    p, T = mask.shape
    if args.warmup >= T:
        raise DataError(f"Warm-up of {args.warmup} ticks leaves no test window in a {T}-tick mask")
    params = args.params if args.params else list(range(len(args.alerts)))
    if len(params) != len(args.alerts):
        raise UsageError(f"Got {len(params)} --params for {len(args.alerts)} alert files")

    rows, points = [], []
    for param, path in zip(params, args.alerts):
        alerts = read_alerts_csv(path, p, T, start_tick=args.warmup)
        report = EvalReport.from_alerts(alerts, mask)
        rows.append({'param': float(param), **report.to_dict()})
        points.append((report.fpr_rows, report.tpr_rows))
        logger.info(f"{path}: tpr_rows={report.tpr_rows:.3f} fpr_rows={report.fpr_rows:.3f} "
                    f"tpr_indiv={report.tpr_indiv:.3f} fpr_indiv={report.fpr_indiv:.3f} f1={report.f1:.3f}")

    report_path = _output_path(args, args.out, 'report.csv')
    write_rows_csv(report_path, rows)
    outputs = {'report': report_path}
    if all(0.0 <= f <= 1.0 and 0.0 <= t <= 1.0 for f, t in points):
        curve = roc_auc(points, [float(v) for v in params])
        roc_path = _output_path(args, args.roc_out, 'roc.csv')
        write_rows_csv(roc_path, [{'param': prm if prm is not None else float('nan'), 'fpr': f, 'tpr': t}
                                  for prm, (f, t) in zip(curve.params, curve.points)])
        outputs['roc'] = roc_path
        logger.info(f"ROC over {len(points)} operating point(s): AUC={curve.auc:.4f}")
    else:
        logger.warning("Rates undefined for this mask; ROC not written")

    return RunManifest(subcommand='evaluate', config={'warmup': args.warmup, 'params': params},
                       inputs={'mask': args.mask, 'alerts': ','.join(args.alerts)}, outputs=outputs)


def cmd_baseline_q(args) -> RunManifest:
    series = _load_series(args)
    if args.warmup >= series.T:
        raise DataError(f"Warm-up of {args.warmup} ticks leaves no test window in {series.T} ticks")
    warmup = series.values[:, :args.warmup]
    q = fit_q_detector(warmup, args.alpha)
    values = q_statistics(series.values, q, args.warmup)
    threshold = q.threshold
    out = _output_path(args, args.out, 'qalerts.csv')
    write_rows_csv(out, [
        {'tick': args.warmup + t, 'q_value': float(v), 'reject': int(v > threshold)}
        for t, v in enumerate(values)
    ])
    logger.info(f"Q test rejected {int(np.sum(values > threshold))} of {values.size} ticks "
                f"(threshold {threshold:.3f})")
    return RunManifest(subcommand='baseline-q',
                       config={'alpha': args.alpha, 'warmup': args.warmup, 'ridge': q.ridge},
                       inputs={'data': args.input}, outputs={'qalerts': out})


def cmd_angle_sweep(args) -> RunManifest:
    rows = angle_sweep(etas=args.etas, replications=args.replications, weeks=args.weeks, p=args.p,
                       k=args.k, seed=args.seed, warmup_len=args.warmup,
                       noise=NoiseSpec(hurst=args.hurst), amplitude=args.amplitude, progress=args.progress)
    out = _output_path(args, args.out, 'angles.csv')
    write_rows_csv(out, rows)
    best = min(rows, key=lambda row: row.mean_angle_rad)
    logger.info(f"Smallest mean angle at eta={best.eta:g}")
    return RunManifest(subcommand='angle-sweep',
                       config={'etas': args.etas, 'replications': args.replications, 'weeks': args.weeks,
                               'p': args.p, 'k': args.k, 'hurst': args.hurst},
                       seed=args.seed, outputs={'angles': out})


def _correlation(args) -> CorrelationSpec:
    return CorrelationSpec(kind=args.noise, phi=args.phi, hurst=args.hurst)


def cmd_phase(args) -> RunManifest:
    g = recovery_boundary(args.beta)
    r_list = args.r_list if args.r_list else [g * m for m in (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0)]
    noise = _correlation(args) if args.noise != 'iid' else None
    cells = phase_transition_experiment(args.p_list, args.beta, r_list, n_trials=args.trials, seed=args.seed,
                                        alpha_rule=args.alpha_rule, noise=noise, progress=args.progress)
    out = _output_path(args, args.out, 'phase.csv')
    write_rows_csv(out, [{'p': c.p, 'beta': c.beta, 'r': c.r, 'rate': c.exact_recovery_rate} for c in cells])
    return RunManifest(subcommand='phase',
                       config={'p_list': args.p_list, 'beta': args.beta, 'r_list': r_list,
                               'trials': args.trials, 'alpha_rule': args.alpha_rule,
                               'noise': dataclasses.asdict(_correlation(args))},
                       seed=args.seed, outputs={'phase': out})


def cmd_consistency(args) -> RunManifest:
    corr = _correlation(args)
    rows = ewma_variance_consistency_experiment(corr, args.lambdas, n=args.n, n_reps=args.reps,
                                                seed=args.seed, sigma2_init=args.sigma2_init,
                                                progress=args.progress)
    out = _output_path(args, args.out, 'consistency.csv')
    write_rows_csv(out, [{'lambda': r.lambda_, 'bias': r.bias, 'variance': r.variance} for r in rows])
    return RunManifest(subcommand='consistency',
                       config={'correlation': dataclasses.asdict(corr), 'lambdas': args.lambdas,
                               'n': args.n, 'reps': args.reps, 'sigma2_init': args.sigma2_init},
                       seed=args.seed, outputs={'consistency': out})


def cmd_fidelity(args) -> RunManifest:
    rows = residual_fidelity_experiment(args.p_list, k=args.k, n=args.n, snr=args.snr, seed=args.seed,
                                        n_test=args.n_test, hurst=args.hurst)
    out = _output_path(args, args.out, 'fidelity.csv')
    write_rows_csv(out, rows, ['p', 'gap', 'bound', 'lambda_min'])
    return RunManifest(subcommand='fidelity',
                       config={'p_list': args.p_list, 'k': args.k, 'n': args.n, 'snr': args.snr,
                               'n_test': args.n_test, 'hurst': args.hurst},
                       seed=args.seed, outputs={'fidelity': out})


def cmd_compare(args) -> RunManifest:
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    config = recommended_config(args.snr, args.duration_hours, warmup_len=args.warmup)
    rows = roc_comparison(p_list=args.p_list, seeds=seeds, snr=args.snr, duration_hours=args.duration_hours,
                          beta=args.beta, config=config, control_limits=args.control_limits,
                          n_levels=args.n_levels, rerun=args.rerun, progress=args.progress,
                          weeks=args.weeks, tick_minutes=args.tick_minutes)
    out = _output_path(args, args.out, 'compare.csv')
    write_rows_csv(out, [{'p': r.p, 'seed': r.seed, 'auc_ipca': r.auc_ipca, 'auc_q': r.auc_q, 'gap': r.gap}
                         for r in rows])
    for p in args.p_list:
        gaps = [r.gap for r in rows if r.p == p]
        logger.info(f"p={p}: mean AUC gap {np.mean(gaps):.4f} over {len(gaps)} seed(s)")
    return RunManifest(subcommand='compare',
                       config={'p_list': args.p_list, 'snr': args.snr, 'duration_hours': args.duration_hours,
                               'beta': args.beta, 'n_seeds': args.n_seeds,
                               'n_levels': args.n_levels, 'rerun': args.rerun},
                       seed=args.seed, outputs={'compare': out})


COMMANDS: Dict[str, Callable] = {
    'generate': cmd_generate,
    'detect': cmd_detect,
    'tune': cmd_tune,
    'evaluate': cmd_evaluate,
    'baseline-q': cmd_baseline_q,
    'angle-sweep': cmd_angle_sweep,
    'phase': cmd_phase,
    'consistency': cmd_consistency,
    'fidelity': cmd_fidelity,
    'compare': cmd_compare,
}


def _add_input_flags(parser):
    parser.add_argument('--input', required=True, help='Data CSV with header t,<stream>,...')
    parser.add_argument('--log-transform', action='store_true', help='Apply x -> ln(1 + x) on load')
    parser.add_argument('--streams', nargs='+', help='Keep only these stream columns')
    parser.add_argument('--top-k', type=int, help='Keep the k streams with the largest total count')


def _add_preset_flags(parser, snr: float = 7.0):
    parser.add_argument('--snr', type=float, default=snr)
    parser.add_argument('--duration-hours', type=float, default=6.0)
    parser.add_argument('--weeks', type=int, default=5)
    parser.add_argument('--tick-minutes', type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    default_output = os.getenv('TELESCOPE_OUTPUT_DIR', 'output')
    parser = ToolkitArgumentParser(prog='telescope', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--output-dir', default=default_output, help='Directory for outputs and manifests')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--quiet', action='store_true', help='Warnings and errors only')
    parser.add_argument('--no-progress', dest='progress', action='store_false', help='Hide progress bars')
    parser.add_argument('--version', action='version', version=f"%(prog)s {modules.__version__}")
    sub = parser.add_subparsers(dest='command', metavar='subcommand', parser_class=ToolkitArgumentParser)

    p = sub.add_parser('generate', help='Synthesize a labeled dataset')
    _add_preset_flags(p)
    p.add_argument('--p', type=int, default=100)
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--hurst', type=float, default=0.9)
    p.add_argument('--amplitude', type=float, default=1.0)
    p.add_argument('--variance', type=float, default=1.0, help='Noise variance sigma^2')
    p.add_argument('--T', dest='T', type=int, help='Series length in ticks (default: --weeks whole weeks)')
    p.add_argument('--start', type=int, help='Anomaly start tick (default: first tick of week four)')
    p.add_argument('--beta', type=float, help='Anomalous streams 0..floor(p^(1-beta))-1 instead of 0,1,2')
    p.add_argument('--warmup', type=int, default=10080)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--data-out')
    p.add_argument('--mask-out')

    p = sub.add_parser('detect', help='Run the streaming detector')
    _add_input_flags(p)
    p.add_argument('--config', help='Flat key = value detector configuration')
    p.add_argument('--warmup', type=int, help='Override warmup_len')
    p.add_argument('--control-limit', type=float, help='Override control_limit')
    p.add_argument('--n-components', type=int, help='Fix the subspace dimension')
    p.add_argument('--alerts-out')
    p.add_argument('--residuals-out')
    p.add_argument('--checkpoint', help='Write the final detector state here')
    p.add_argument('--resume-from', help='Restore a detector state and stream every input tick')

    p = sub.add_parser('tune', help='Grid-search the detector parameters per (snr, duration)')
    p.add_argument('--snrs', type=float, nargs='+', default=[2.0, 5.0, 7.0])
    p.add_argument('--durations', type=float, nargs='+', default=[1.0, 6.0])
    p.add_argument('--replications', type=int, default=5)
    p.add_argument('--lambdas', type=float, nargs='+', default=[1e-2, 1e-3, 1e-4])
    p.add_argument('--lambda-mus', type=float, nargs='+', default=[1e-2, 1e-3, 1e-4])
    p.add_argument('--lambda-sigmas', type=float, nargs='+', default=[1e-4, 1e-5, 1e-6])
    p.add_argument('--reg-guards', type=float, nargs='+', default=[3.0, 4.0, 5.0])
    p.add_argument('--control-limits', type=float, nargs='+', default=list(DEFAULT_CONTROL_LIMITS))
    p.add_argument('--eta', type=float, default=1e-5)
    p.add_argument('--n-components', type=int, default=PRESET_TREND_COUNT)
    p.add_argument('--warmup', type=int, default=10080)
    p.add_argument('--p', type=int, default=100)
    p.add_argument('--weeks', type=int, default=5)
    p.add_argument('--tick-minutes', type=float, default=2.0)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')

    p = sub.add_parser('evaluate', help='Score alert files against a ground-truth mask')
    p.add_argument('--alerts', nargs='+', required=True)
    p.add_argument('--mask', required=True)
    p.add_argument('--params', type=float, nargs='+', help='Parameter value (e.g. L) per alerts file')
    p.add_argument('--warmup', type=int, default=10080)
    p.add_argument('--out')
    p.add_argument('--roc-out')

    p = sub.add_parser('baseline-q', help='Chi-square Q-statistic detection')
    _add_input_flags(p)
    p.add_argument('--alpha', type=float, default=DEFAULT_ALPHA)
    p.add_argument('--warmup', type=int, default=10080)
    p.add_argument('--out')

    p = sub.add_parser('angle-sweep', help='Subspace tracking accuracy per iPCA memory')
    p.add_argument('--etas', type=float, nargs='+', default=list(DEFAULT_ETA_GRID))
    p.add_argument('--replications', type=int, default=10)
    p.add_argument('--weeks', type=int, default=10)
    p.add_argument('--p', type=int, default=100)
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--hurst', type=float, default=0.9)
    p.add_argument('--amplitude', type=float, default=1.0)
    p.add_argument('--warmup', type=int, default=10080)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')

    for name, help_text in (('phase', 'Exact support recovery phase diagram'),
                            ('consistency', 'EWMA variance consistency')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--noise', choices=['iid', 'ar1', 'fgn'], default='iid')
        p.add_argument('--phi', type=float, default=0.5)
        p.add_argument('--hurst', type=float, default=0.5)
        p.add_argument('--seed', type=int, default=0)
        p.add_argument('--out')
    phase = sub.choices['phase']
    phase.add_argument('--p-list', type=int, nargs='+', default=[500, 5000])
    phase.add_argument('--beta', type=float, default=0.75)
    phase.add_argument('--r-list', type=float, nargs='+')
    phase.add_argument('--trials', type=int, default=200)
    phase.add_argument('--alpha-rule', choices=sorted(ALPHA_RULES), default='inv_log_sq')
    consistency = sub.choices['consistency']
    consistency.add_argument('--lambdas', type=float, nargs='+', default=[1e-3, 1e-4, 1e-5])
    consistency.add_argument('--n', type=int, default=100000)
    consistency.add_argument('--reps', type=int, default=100)
    consistency.add_argument('--sigma2-init', type=float, default=0.0)

    p = sub.add_parser('fidelity', help='Residual fidelity against the resilience bound')
    p.add_argument('--p-list', type=int, nargs='+', default=[50, 100, 200])
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--n', type=int, default=10080)
    p.add_argument('--snr', type=float, default=7.0)
    p.add_argument('--n-test', type=int, default=1000)
    p.add_argument('--hurst', type=float, default=0.9)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')

    p = sub.add_parser('compare', help='ROC comparison of the streaming detector and the Q test')
    _add_preset_flags(p, snr=2.0)
    p.add_argument('--p-list', type=int, nargs='+', default=[100, 500])
    p.add_argument('--beta', type=float, default=0.75)
    p.add_argument('--control-limits', type=float, nargs='+', default=list(DEFAULT_CONTROL_LIMITS))
    p.add_argument('--n-levels', type=int, default=25, help='Score quantiles added to the L sweep')
    p.add_argument('--no-rerun', dest='rerun', action='store_false',
                   help='Threshold one reference run instead of re-running per L')
    p.add_argument('--n-seeds', type=int, default=5)
    p.add_argument('--warmup', type=int, default=10080)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')

    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on usage errors, 2 on data errors"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ', '.join(COMMANDS))
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    _configure_logging(args)
    try:
        manifest = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except (DataError, SubspaceError, EmbeddingError, OSError) as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA

    manifest.version = modules.__version__
    manifest.write(args.output_dir)
    return EXIT_OK


def main():
    """Command line entry point"""
    load_dotenv()
    sys.exit(dispatch())


if __name__ == '__main__':
    main()
