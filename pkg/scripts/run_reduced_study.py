#!/usr/bin/env python3
"""Reduced-scale replicated study: 200 replicates at the full data size.

Writes metrics.csv / raw_estimates.csv / true_effects.csv / manifest.json and
prints the transfer vs target-only comparison. Expect roughly half an hour of
serial compute; pass --threads to spread replicates over worker processes.
"""

import argparse
import sys
import time

from tlcausal.io import config_from_dict, run_simulate

STUDY_SEED = 1729


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--output-dir", default="reduced_study_out")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--replicates", type=int, default=200)
    ap.add_argument("--oracle-draws", type=int, default=10_000_000)
    ap.add_argument("--seed", type=int, default=STUDY_SEED)
    args = ap.parse_args(argv)

    cfg = config_from_dict({
        "mode": "simulate",
        "seed": args.seed,
        "output_dir": args.output_dir,
        "threads": args.threads,
        "simulate": {"replicates": args.replicates,
                     "oracle_draws": args.oracle_draws},
    })
    t0 = time.perf_counter()
    bundle = run_simulate(cfg)
    wall = time.perf_counter() - t0

    table = bundle.metrics
    wins = 0
    pairs = 0
    cov_t = []
    cov_b = []
    print(f"\n{'pair':>8} {'rmse(tr)':>10} {'rmse(to)':>10} {'cov(tr)':>8} {'cov(to)':>8}")
    for row in table.rows:
        if row.method != "transfer":
            continue
        other = table.lookup(row.m1, row.m2, "target-only")
        pairs += 1
        wins += row.rmse <= other.rmse
        cov_t.append(row.coverage)
        cov_b.append(other.coverage)
        print(f"{row.m1}->{row.m2:>2} {row.rmse:>10.4f} {other.rmse:>10.4f} "
              f"{row.coverage:>8.3f} {other.coverage:>8.3f}")
    print(f"\nrmse wins: {wins}/{pairs}")
    print(f"mean coverage: transfer {sum(cov_t) / len(cov_t):.4f}, "
          f"target-only {sum(cov_b) / len(cov_b):.4f}")
    print(f"wall time: {wall / 60:.1f} min ({args.threads} thread(s))")
    return 0


if __name__ == "__main__":
    sys.exit(main())
