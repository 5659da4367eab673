#!/usr/bin/env python3
"""Uplink budget sweep: uncertainty-gated selection with thresholds calibrated
to target fractions, against random selection at the same budgets plus the
confidence and all-data baselines."""

import argparse
import sys

from cloudadapt import harness
from cloudadapt.config import ExperimentConfig, load


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="config file (defaults built in)")
    ap.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
    ap.add_argument("--fractions", default="0.25,0.5,0.75")
    ap.add_argument("--out", default="selection_sweep.csv")
    args = ap.parse_args()

    cfg = load(args.config) if args.config else ExperimentConfig()
    seeds = list(range(args.seeds)) if args.seeds else list(cfg.seeds)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    result = harness.run_suite(cfg, ["confidence", "all_uplink"], seeds,
                               sweep_fractions=fractions)
    harness.suite_csv(result, args.out)

    print(f"{'row':<14} {'target':>7} {'realized':>9} {'mean_acc':>9} {'up_bytes':>10}")
    for row in result.rows:
        target = "-" if row.target_frac is None else f"{row.target_frac:.2f}"
        print(f"{row.label:<14} {target:>7} {row.median_uplink_frac:>9.3f} "
              f"{row.median_mean_acc:>9.4f} {row.median_up_bytes:>10.0f}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
