#!/usr/bin/env python3
"""
Pipeline Script for the Telescope Anomaly Toolkit
Standalone script to synthesize a labeled dataset, run the detector and the Q baseline, and score both
"""

import argparse
import os
import sys
import logging
from dotenv import load_dotenv

# Add the current directory to the path so we can import our modules
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from modules.baseline import fit_q_detector, q_detect_stream
from modules.evalkit import EvalReport, recommended_config
from modules.ingest import RunManifest, SeriesMatrix, write_alerts_csv, write_mask_csv, write_series_csv
from modules.detector import run_stream
from modules.synthgen import default_preset, synthesize_dataset
from modules import __version__

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Synthesize, detect and score one labeled dataset")
    parser.add_argument('--snr', type=float, default=7.0, help='Anomaly strength')
    parser.add_argument('--duration-hours', type=float, default=6.0, help='Anomaly duration')
    parser.add_argument('--seed', type=int, default=0)
    return parser.parse_args(argv)


def main(argv=None):
    """Run the default synthetic protocol end to end"""
    args = parse_args(argv)
    logger.info("🚀 Starting Telescope Anomaly pipeline")

    output_dir = os.getenv('TELESCOPE_OUTPUT_DIR', 'output')
    snr, duration_hours, seed = args.snr, args.duration_hours, args.seed
    os.makedirs(output_dir, exist_ok=True)

    try:
        # Step 1: Synthesize traffic
        logger.info("📦 Synthesizing labeled traffic...")
        config = recommended_config(snr, duration_hours)
        model, spec, T = default_preset(snr=snr, duration_hours=duration_hours, seed=seed)
        dataset = synthesize_dataset(model, spec, T, seed=seed + 1, warmup_len=config.warmup_len)
        series = SeriesMatrix.from_array(dataset.data)
        write_series_csv(os.path.join(output_dir, 'data.csv'), series)
        write_mask_csv(os.path.join(output_dir, 'mask.csv'), dataset.mask, series.names)
        logger.info(f"✅ Synthesized {dataset.p} streams x {dataset.T} ticks")

        # Step 2: Streaming detection
        logger.info("🔍 Running the streaming detector...")
        result = run_stream(dataset.data, config)
        alerts_path = os.path.join(output_dir, 'alerts.csv')
        write_alerts_csv(alerts_path, result.alerts)
        logger.info(f"✅ Raised {len(result.alerts)} alerts")

        # Step 3: Chi-square baseline
        logger.info("📝 Running the Q-statistic baseline...")
        q = fit_q_detector(dataset.data[:, :config.warmup_len])
        rejected = q_detect_stream(dataset.data, q, config.warmup_len)
        logger.info(f"✅ Q test rejected {int(rejected.sum())} of {rejected.size} ticks")

        # Step 4: Score
        report = EvalReport.from_alerts(result.alerts, dataset.mask)
        positive = dataset.mask[:, config.warmup_len:].any(axis=0)
        q_tpr = float((rejected & positive).sum() / max(int(positive.sum()), 1))
        q_fpr = float((rejected & ~positive).sum() / max(int((~positive).sum()), 1))
        logger.info("📊 Evaluation:")
        logger.info(f"   - Detector rows:  TPR={report.tpr_rows:.3f} FPR={report.fpr_rows:.3f}")
        logger.info(f"   - Detector indiv: TPR={report.tpr_indiv:.3f} FPR={report.fpr_indiv:.5f} F1={report.f1:.3f}")
        logger.info(f"   - Q test rows:    TPR={q_tpr:.3f} FPR={q_fpr:.3f}")

        RunManifest(
            subcommand='pipeline',
            config=config.to_dict(),
            seed=seed,
            outputs={'alerts': alerts_path, 'data': os.path.join(output_dir, 'data.csv'),
                     'mask': os.path.join(output_dir, 'mask.csv')},
            version=__version__,
        ).write(output_dir)

        logger.info("🎉 Pipeline finished successfully!")
        logger.info("Score other alert files with: python app.py evaluate --alerts ... --mask ...")
        return True

    except Exception as e:
        logger.error(f"❌ Error running pipeline: {str(e)}")
        return False


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
