"""holokit command line: one verb per experiment kind, plus ``validate``."""
from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .domain_core import domain_to_dict
from .errors import HolokitError
from .experiments import KINDS, EXIT_ASSERT, EXIT_OK, ExperimentConfig, parse_domain_spec, render_csv, run_experiment


def _common(p):
    p.add_argument("--domain", required=True, help="preset:name[:param] or JSON text/file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--point", action="append", default=[], help="comma-separated complex coordinates")
    p.add_argument("--dir", dest="direction")
    p.add_argument("--seq", dest="sequence", help="normal:K, tangential-mix:K, or mode:d1,d2,...")
    p.add_argument("--base", help="boundary base point of the sequence")
    p.add_argument("--N", type=int, default=8)
    p.add_argument("--M", type=int, default=256)
    p.add_argument("--eta", type=float, default=1e-6)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--budget", type=float, help="wall-clock budget in seconds")
    p.add_argument("--out", help="output stem; writes .csv, .json and .timing.csv")


def build_parser():
    ap = argparse.ArgumentParser(prog="holokit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for kind in KINDS:
        _common(sub.add_parser(kind))
    v = sub.add_parser("validate", help="parse a domain and print its normalized JSON")
    v.add_argument("--domain", required=True)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verb == "validate":
        try:
            D = parse_domain_spec(args.domain)
        except HolokitError as e:
            print(f"invalid: {e}", file=sys.stderr)
            return EXIT_ASSERT
        print(json.dumps(domain_to_dict(D), sort_keys=True))
        return EXIT_OK
    opts = {k: v for k, v in vars(args).items() if k != "verb"}
    cfg = ExperimentConfig(kind=args.verb, points=opts.pop("point"), **opts)
    res = run_experiment(cfg)
    if res.rows:
        sys.stdout.write(render_csv(res.rows))
    if res.exit_code != EXIT_OK:
        print(f"error: {res.message}", file=sys.stderr)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
