"""Command line entry point: ``avec run|sweep|compare|diagnose|emit-plot-data``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from avec.config import ConfigError, RunConfig, load_config, parse_override, to_flat_dict, from_flat_dict
from avec import harness


def _config(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in args.set)
    if args.config:
        return load_config(args.config, overrides)
    return from_flat_dict({**to_flat_dict(RunConfig()), **overrides}) if overrides else RunConfig()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avec", description="Actor-critic laboratory with residual-variance critics.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("run", "sweep"):
        s = sub.add_parser(verb)
        s.add_argument("config", nargs="?", help="config file; defaults are used when omitted")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--out", help="run directory (run) or parent directory (sweep)")
        if verb == "sweep":
            s.add_argument("--seeds", type=int, default=6, help="number of seeds, 0..n-1")
            s.add_argument("--workers", type=int, default=1)
            s.add_argument("--resume", action="store_true", help="skip seeds that already finished")
    s = sub.add_parser("compare")
    s.add_argument("--baseline", nargs="+", required=True)
    s.add_argument("--variant", nargs="+", required=True)
    s.add_argument("--window", type=int, default=harness.FINAL_WINDOW)
    s = sub.add_parser("diagnose")
    s.add_argument("run_dir")
    s = sub.add_parser("emit-plot-data")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--quantity", required=True)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            code, d = harness.run(_config(args), args.out)
            print(d)
            return code
        if args.verb == "sweep":
            cfg = _config(args).validate()
            results = harness.sweep(cfg, range(args.seeds), args.workers, args.out, args.resume)
            for code, d in results:
                print(code, d)
            return max(code for code, _ in results)
        if args.verb == "compare":
            print(json.dumps(harness.compare(args.baseline, args.variant, args.window).to_dict(), indent=1))
            return 0
        if args.verb == "diagnose":
            recs = harness.diagnose_run(args.run_dir)
            print(json.dumps(recs, indent=1))
            return 0 if all(r["digest_before"] == r["digest_after"] for r in recs) else 1
        if args.verb == "emit-plot-data":
            for path in harness.emit_plot_data(args.run_dirs, args.quantity, args.out):
                print(path)
            return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except (KeyError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return harness.EXIT_FAILED
    return harness.EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
