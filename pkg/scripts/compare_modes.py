"""Run the paired two-stage vs end-to-end comparison over several seeds.

Generates the synthetic dataset for each seed, runs both training modes on it
with identical data order, and writes one CSV row per (seed, mode) plus a
mean-over-seeds table.

Usage:
    python scripts/compare_modes.py
    python scripts/compare_modes.py --seeds 0 1 2 --config run.json
"""

import argparse
from pathlib import Path

import numpy as np
from rich.console import Console

from finegrid.app import setup_logging
from finegrid.config import RunConfig
from finegrid.formatting import comparison_table, print_status
from finegrid.grid import synth_data
from finegrid.storage import write_csv
from finegrid.training import compare_modes

OUTPUT_DIR = Path(__file__).parent.parent / "results"


def run_seeds(config_path, seeds, branches=None):
    """All comparison rows, tagged with their seed."""
    rows = []
    for seed in seeds:
        config = RunConfig.load(config_path).with_seed(seed)
        data = synth_data(config.data)
        print_status(f"Seed {seed}: {data.coarse.n_frames} frames")
        rows.extend((seed, row) for row in compare_modes(data, config, branches))
    return rows


def summarize(rows):
    """Mean test metrics per mode label."""
    by_label = {}
    for _, row in rows:
        by_label.setdefault(row.label, []).append(row)
    return {
        label: {
            "rmse": float(np.mean([r.report.rmse for r in group])),
            "mae": float(np.mean([r.report.mae for r in group])),
            "mape": float(np.mean([r.report.mape for r in group])),
            "first_val_loss": float(np.mean([r.first_val_loss for r in group])),
        }
        for label, group in by_label.items()
    }


def main():
    parser = argparse.ArgumentParser(description='Paired two-stage vs end-to-end comparison')
    parser.add_argument('--config', type=Path, help='JSON run configuration')
    parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    parser.add_argument('--branches', nargs='+', help='Branch settings to sweep')
    args = parser.parse_args()

    setup_logging(verbose=False)
    OUTPUT_DIR.mkdir(exist_ok=True)
    console = Console()

    rows = run_seeds(args.config, args.seeds, args.branches)
    for seed in args.seeds:
        console.print(comparison_table([r for s, r in rows if s == seed], f"Seed {seed}"))

    write_csv(OUTPUT_DIR / "comparison_seeds.csv",
              ("seed", "mode", "rmse", "mae", "mape", "first_val_loss", "best_val_loss"),
              [(seed, r.label, r.report.rmse, r.report.mae, r.report.mape, r.first_val_loss,
                r.best_val_loss) for seed, r in rows])
    for label, means in summarize(rows).items():
        print_status(f"{label}: mean RMSE {means['rmse']:.4f}, MAE {means['mae']:.4f}, "
                     f"MAPE {means['mape']:.4f}, epoch-1 val loss {means['first_val_loss']:.6f}")
    print_status(f"Results written to {OUTPUT_DIR / 'comparison_seeds.csv'}", "success")


if __name__ == "__main__":
    main()
