#!/usr/bin/env python3
"""Component ablation: frozen source model, pseudo-labels alone, plus
alignment and prompt, full method. Medians over the configured seeds with a
shared stream, one row per preset."""

import argparse
import sys

from cloudadapt import harness
from cloudadapt.config import ExperimentConfig, load

ROWS = ("source_only", "pseudo_label", "pseudo_label_vpa", "full")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="config file (defaults built in)")
    ap.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()

    cfg = load(args.config) if args.config else ExperimentConfig()
    seeds = list(range(args.seeds)) if args.seeds else list(cfg.seeds)
    result = harness.run_suite(cfg, list(ROWS), seeds)
    harness.suite_csv(result, args.out)

    print(f"{'preset':<18} {'mean_acc':>9} {'uplink%':>8} {'up_bytes':>10}")
    for row in result.rows:
        print(f"{row.label:<18} {row.median_mean_acc:>9.4f} "
              f"{100 * row.median_uplink_frac:>7.1f}% {row.median_up_bytes:>10.0f}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
