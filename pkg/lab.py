"""
Random-Discharge Integrate-and-Fire Lab
=======================================

Runs one experiment file, or the desk-scale acceptance suite, and writes
plot-ready CSVs plus a manifest and a summary into an artifact directory.

Architecture
------------
1. **Experiment files** - sectioned `key = value` files ([model], [grid],
   [run], [init], [output]) parsed by helpers/experiment_config.py. Every
   problem in a file is reported at once; nothing runs until the file is
   clean.

2. **Dispatch** - helpers/run_config.py sends the run to the module for its
   mode: `tau` (dilated-time solver), `t` (original-time solver, optionally
   with the auxiliary split), `sweep` (one tau solver per eps, run
   concurrently), `blowup` (tau solver chained with the blow-up analytics),
   `particles` (Monte Carlo ensemble) or `validate`.

3. **Artifacts** - each run directory holds manifest.json (config echo,
   code version, seed), summary.txt and the mode's CSVs, all floats printed
   with 17 significant digits. The same config with the same seed gives the
   same files whatever --threads is.

4. **Validation** - `validate` runs the acceptance criteria of
   helpers/acceptance.py (conservation, steady state, blow-up oracle,
   dichotomy, uniform bounds, limit indicators, Green-function oracle, toy
   problems, particles, timescale roundtrip) and prints each measured value
   against its limit. `--only` picks criteria by name.

Exit status: 0 success, 1 a validation criterion failed, 2 invalid config or
parameters, 3 solver or runtime error.

Usage
-----
    source .venv/bin/activate
    python lab.py run configs/plateau_sweep.ini
    python lab.py run configs/classical_tau.ini --output-dir out/classical --seed 7
    python lab.py validate --only conservation toy_problems
"""
from __future__ import annotations

import argparse
import sys
from logging import INFO, getLogger
from pathlib import Path
from typing import Optional, Sequence

from config import DEFAULT_THREADS, OUT_PATH
from helpers.acceptance import CRITERIA, validate
from helpers.run_config import ExitStatus, run_config
from lib.utils import log_metrics, setup_logging, timestamp

setup_logging(INFO)
logger = getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab.py", description="Random-discharge integrate-and-fire lab")
    parser.add_argument("--output-dir", type=Path, default=None, help="artifact directory (overrides [output])")
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (default {DEFAULT_THREADS})")
    parser.add_argument("--seed", type=int, default=None, help="seed override for particle runs")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one experiment file")
    run.add_argument("config", type=Path)

    check = commands.add_parser("validate", help="run the acceptance suite")
    check.add_argument("--only", nargs="+", choices=sorted(CRITERIA), metavar="NAME",
                       help=f"criteria to run: {', '.join(CRITERIA)}")
    return parser


def _validate(only: Optional[Sequence[str]], output_dir: Optional[Path], threads: int, seed: Optional[int]) -> int:
    directory = output_dir or OUT_PATH / f"{timestamp()}_validate"
    directory.mkdir(parents=True, exist_ok=True)
    kwargs = {"seed": seed} if seed is not None else {}
    report = validate(only, threads=threads, **kwargs)
    report.write(directory)
    log_metrics(logger, "VALIDATE", report.to_metrics_dict())
    if report.passed:
        logger.info("[VALIDATE] all %d criteria passed; artifacts in %s", len(report.results), directory)
        return ExitStatus.OK
    logger.error("[VALIDATE] failed: %s", ", ".join(report.failures))
    return ExitStatus.FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else DEFAULT_THREADS
    if threads < 1:
        logger.error("--threads must be at least 1, got %d", threads)
        return ExitStatus.INVALID
    if args.command == "validate":
        return int(_validate(args.only, args.output_dir, threads, args.seed))
    outcome = run_config(args.config, args.output_dir, threads, args.seed)
    if outcome.directory is not None:
        logger.info("Artifacts in %s", outcome.directory)
    return int(outcome.status)


if __name__ == "__main__":
    sys.exit(main())
