"""Command line entry point: ``supermarket run|validate|report``."""
from __future__ import annotations

import argparse
import json
import sys

from .harness import (ConfigError, ResultBundle, emit_plotdata, load_config,
                      resolve_output_dir, run_experiment)


def _print_checks(summary, out=None):
    out = sys.stdout if out is None else out
    for name, c in sorted(summary.get("checks", {}).items()):
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status}  {name}: value={json.dumps(c['value'])} threshold={json.dumps(c['threshold'])}",
              file=out)
    if not summary.get("complete", True):
        print(f"INCOMPLETE  {len(summary.get('failures', []))} replica failures", file=out)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.n_jobs is not None:
        from dataclasses import replace
        cfg = replace(cfg, n_jobs=args.n_jobs)
    bundle = run_experiment(cfg, args.output_dir)
    _print_checks(bundle.summary)
    print(f"bundle written to {bundle.path}")
    return 0 if bundle.passed else 1


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"{args.config}: valid {cfg.mode} config '{cfg.name}', "
          f"output to {resolve_output_dir(cfg)}")
    return 0


def cmd_report(args) -> int:
    bundle = ResultBundle.load(args.bundle)
    _print_checks(bundle.summary)
    paths = emit_plotdata(bundle)
    for name, p in paths.items():
        print(f"plot data {name}: {p}")
    return 0 if bundle.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="supermarket", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config and write a bundle")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--n-jobs", type=int, default=None)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="parse and check a config without running it")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("report", help="summarise a bundle and write plot data")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_report)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
