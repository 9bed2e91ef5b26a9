#!/usr/bin/env python3
"""Full-scale replicated study: 1000 replicates at the full data size.

Several hours of serial compute; use --threads on a multi-core machine.
"""

import sys

import run_reduced_study


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not any(a.startswith("--replicates") for a in argv):
        argv += ["--replicates", "1000"]
    if not any(a.startswith("--output-dir") for a in argv):
        argv += ["--output-dir", "full_study_out"]
    return run_reduced_study.main(argv)


if __name__ == "__main__":
    sys.exit(main())
