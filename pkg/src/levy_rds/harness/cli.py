"""``levy-rds <kind> --config FILE [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys

from .._validation import ConfigError
from .config import KINDS, default_config, load_config_file
from .runner import run
from .seeding import resolve_seed


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levy-rds", description="Levy-driven random dynamical systems experiments")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", help="configuration file (TOML); defaults are used when omitted")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides LEVY_RDS_SEED and the config)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config_file(args.config) if args.config else default_config(args.kind)
        cfg = cfg.replace(kind=args.kind, seed=resolve_seed(cfg.seed, args.seed), output=args.out)
    except (ConfigError, OSError) as exc:
        print(f"levy-rds: config error: {exc}", file=sys.stderr)
        return 2
    log = None if args.quiet else (lambda line: print(line, flush=True))
    manifest, _ = run(cfg, log=log)
    status = "PASS" if manifest.passed else "FAIL"
    print(f"{status}: {len(manifest.checks)} checks, outputs in {cfg.output}")
    return manifest.exit_status


if __name__ == "__main__":
    sys.exit(main())
