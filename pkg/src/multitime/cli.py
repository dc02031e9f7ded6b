"""Command-line entry point: ``multitime run|validate|export``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .runner import EXIT_CONFIG, EXIT_OK, export_expectation_series, run_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multitime", description="Multi-time wave function simulator and checks")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the scenario described by a YAML config")
    run.add_argument("config")
    run.add_argument("--output-root", default=None,
                     help="directory that output.directory is resolved against (overrides MULTITIME_OUTPUT_ROOT)")

    val = sub.add_parser("validate", help="schema and invariant check only")
    val.add_argument("config")

    exp = sub.add_parser("export", help="write an expectation series as a tab-separated table")
    exp.add_argument("run_dir")
    exp.add_argument("observable", help="series name, e.g. phi, source, source_autocorrelation")
    exp.add_argument("-o", "--out", default=None, help="output file (default <run_dir>/<observable>.tsv)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "validate":
        try:
            cfg, _ = load_config(args.config)
        except ConfigError as exc:
            print("config error:\n  " + "\n  ".join(exc.errors), file=sys.stderr)
            return EXIT_CONFIG
        print(f"ok: scenario {cfg.scenario}, {cfg.lattice.n_particles} particle(s), {cfg.field.n_modes} mode(s)")
        return EXIT_OK
    if args.command == "export":
        try:
            out = export_expectation_series(args.run_dir, args.observable, args.out)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(out)
        return EXIT_OK
    code, _, message = run_scenario(args.config, args.output_root)
    print(message, file=sys.stderr if code else sys.stdout)
    return code


if __name__ == "__main__":
    sys.exit(main())
