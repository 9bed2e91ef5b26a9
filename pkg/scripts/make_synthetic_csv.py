#!/usr/bin/env python3
"""Generate the registry-shaped synthetic CSV used by the end-to-end demos:
3 groups x 4 regions, ~3600 rows, 30 numeric covariates plus one 3-level
categorical (32 expanded columns), centers nested in regions, and in each
region one center that contains no rows from the first group.
"""

import argparse
import json
import sys

from tlcausal.io import write_synthetic_registry_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("path", nargs="?", default="synthetic_registry.csv")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--rows", type=int, default=3600)
    args = ap.parse_args(argv)
    info = write_synthetic_registry_csv(args.path, seed=args.seed,
                                        n_rows=args.rows)
    print(json.dumps(info, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
