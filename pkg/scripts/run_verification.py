#!/usr/bin/env python3
"""Run the property-check battery and print one JSON line per property.

Exits nonzero if any property fails. Useful as a quick health check that is
cheaper than the full pytest run.
"""

import argparse
import sys

from histlayer import verify


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trials", type=int, default=50,
                        help="instance count for the randomized properties")
    args = parser.parse_args()

    reports = verify.run_all(seed=args.seed, trials=args.trials)
    ok = True
    for r in reports:
        print(r.to_json())
        ok = ok and r.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
