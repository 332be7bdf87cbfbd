#!/usr/bin/env python3
"""Full experiment sweep: generate data, train every mode over several seeds,
and write the comparison table plus the measured local Bayes ceiling.

This is the long-running companion to `histlayer compare`; it uses the
default configuration unless a config file or overrides are given.

Example (reduced scale, a few minutes):
    python scripts/run_experiments.py --out runs/quick \
        --set n_train=400 --set n_val=200 --set n_test=200 \
        --set epochs=20 --set decay_epoch=14
"""

import argparse
import sys
from pathlib import Path

from histlayer.cli import cmd_gen_data, compare_runs
from histlayer.config import load_config


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("runs/experiments"))
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()

    cfg = load_config(args.config, args.set)
    data_dir = args.out / "data"
    cmd_gen_data(cfg, data_dir)
    results, ceiling = compare_runs(cfg, args.out, data_dir)

    print(f"\nlocal Bayes ceiling: {ceiling:.4f}")
    for mode, runs in results.items():
        vals = [r["val_per_pixel"] for r in runs]
        print(f"{mode:>14}: val per-pixel mean {sum(vals) / len(vals):.4f} "
              f"over {len(vals)} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
