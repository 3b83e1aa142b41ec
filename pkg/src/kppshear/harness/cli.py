"""Command-line entry point.

Each experiment subcommand takes ``--config``; ``--seed`` replaces the seed
base (keeping the count), ``--workers`` and ``--out`` override the config.
Relative output directories are resolved under ``$KPPSHEAR_OUT`` when set.

Exit status: 0 on success, 1 on a module error, 2 on an invalid config,
3 when ``rerun`` finds mismatched digests.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ConfigInvalid, KppShearError
from .config import ExperimentConfig
from .runner import report, rerun, run

SUBCOMMANDS = {
    "fieldcheck": "covariance_check",
    "lyapunov": "lyapunov_sweep",
    "gammastar": "gamma_star_table",
    "speed": "speed_sweep",
    "direct": "direct_run",
    "frozen": "frozen_divergence",
    "extremes": "extremes_check",
}


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _absolute_table(cfg, base_dir):
    """Pin the gamma* table path so the manifest reruns from any directory."""
    path = Path(cfg.numerics["gamma_star_table"])
    if not path.is_absolute():
        path = path if path.exists() else base_dir / path
    d = cfg.to_dict()
    d["numerics"]["gamma_star_table"] = str(path.resolve())
    return ExperimentConfig.from_dict(d)


def build_parser():
    p = argparse.ArgumentParser(prog="kppshear", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, exp in SUBCOMMANDS.items():
        s = sub.add_parser(name, help=f"run the {exp} experiment")
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--seed", type=_u64)
        s.add_argument("--workers", type=_positive_int)
        s.add_argument("--out", type=Path)
    r = sub.add_parser("report", help="aggregate CSVs of a run directory into report.csv")
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--config", type=Path, help="ignored; accepted for symmetry")
    rr = sub.add_parser("rerun", help="re-execute a manifest and compare digests")
    rr.add_argument("--config", required=True, type=Path, help="manifest.json or its directory")
    rr.add_argument("--workers", type=_positive_int)
    rr.add_argument("--out", type=Path)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            rows = report(args.out)
            print(f"wrote {args.out / 'report.csv'} ({len(rows)} rows)")
            return 0
        if args.command == "rerun":
            manifest, mismatched = rerun(args.config, args.out, args.workers)
            if mismatched:
                print("digest mismatch: " + ", ".join(mismatched), file=sys.stderr)
                return 3
            print(f"reproduced {len(manifest.outputs)} outputs")
            return 0
        cfg = ExperimentConfig.load(args.config)
        expected = SUBCOMMANDS[args.command]
        if cfg.experiment != expected:
            raise ConfigInvalid("experiment", f"'{args.command}' expects {expected}, "
                                              f"config has {cfg.experiment}")
        cfg = cfg.with_overrides(seed=args.seed, workers=args.workers, output_dir=args.out)
        if cfg.experiment == "speed_sweep":
            cfg = _absolute_table(cfg, args.config.parent)
        manifest = run(cfg)
        for w in manifest.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"wrote {len(manifest.outputs)} outputs")
        return 0
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (KppShearError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
