"""Command line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure,
4 run completed but some strata were flagged. Failures also leave an
error.json in the output directory when one is known.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .io import ReportBundle, load_config, run_estimate, run_sensitivity, run_simulate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_FLAGGED = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tlcausal",
        description="Transfer-learned counterfactual region estimates for "
                    "small strata, plus a replicated synthetic-data study.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
            ("simulate", "run a replicated synthetic-data study"),
            ("estimate", "estimate stratum contrasts from a CSV registry"),
            ("sensitivity", "leave-one-center-out analysis for one stratum")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON study config")
        p.add_argument("--output-dir", help="override the config output_dir")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="worker processes for the replicate loop "
                            "(simulate mode; other modes run single threaded)")
    return parser


def _write_error(output_dir, command, exc):
    if not output_dir:
        return
    try:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "error.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"command": command, "error_type": type(exc).__name__,
                       "message": str(exc)}, fh, indent=2)
            fh.write("\n")
    except OSError:
        pass


def _summarize(bundle: ReportBundle):
    print(f"{bundle.mode}: wrote {', '.join(bundle.files)} to {bundle.output_dir}")
    if bundle.metrics is not None:
        n_rows = len(bundle.metrics.rows)
        print(f"  metrics for {n_rows} (pair, method) combinations over "
              f"{bundle.metrics.n_replicates} replicates")
    if bundle.estimates is not None:
        print(f"  {len(bundle.estimates)} estimates")
    if bundle.sensitivity is not None:
        print(f"  reference series plus {len(bundle.sensitivity.excluded)} "
              "leave-one-out runs")
    if bundle.flagged_count:
        print(f"  WARNING: {bundle.flagged_count} flagged "
              "estimates/strata (see manifest.json)")


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads

    output_dir = args.output_dir
    try:
        cfg = load_config(args.config, overrides=overrides)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error(output_dir, args.command, exc)
        return EXIT_CONFIG
    if cfg.mode != args.command:
        print(f"error: config mode is {cfg.mode!r} but the {args.command!r} "
              "subcommand was invoked", file=sys.stderr)
        return EXIT_CONFIG

    runner = {"simulate": run_simulate, "estimate": run_estimate,
              "sensitivity": run_sensitivity}[cfg.mode]
    try:
        bundle = runner(cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error(cfg.output_dir, args.command, exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _write_error(cfg.output_dir, args.command, exc)
        return EXIT_RUNTIME

    _summarize(bundle)
    return EXIT_FLAGGED if bundle.flagged_count else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
