"""Command-line entry point: ``rdslab <pipeline> [--config PATH] [--seed N] [--out DIR] [--criterion NAME]``.

Exit status: 0 success, 2 a checked invariant failed (named on stderr),
3 configuration error (nothing written).
"""
from __future__ import annotations

import argparse
import sys

from .config import PIPELINES, ConfigError, ExperimentConfig
from .pipelines import RUNNERS, PipelineFailure
from .reports import OutputDir, envelope

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 2, 3

DEFAULT_SYSTEM = {"spectrum": "diag_cocycle", "manifold": "quadratic_model", "stack": "solenoid",
                  "srb": "solenoid", "entropy": "solenoid", "verify": "diag_cocycle"}


def run(cfg: ExperimentConfig, quiet: bool = False) -> int:
    """Run the configured pipeline and write its outputs; returns the exit status."""
    from .acceptance import summary_table
    out = OutputDir(cfg.output)
    say = (lambda *a: None) if quiet else (lambda *a: print(*a, file=sys.stderr))
    try:
        failed = RUNNERS[cfg.pipeline](cfg, out)
        if cfg.pipeline == "verify" and not quiet:
            crit = out.files["report.json"][1]["result"]["criteria"]
            print(summary_table([[r["criterion"], r["name"], r["expected"], r["observed"], r["tolerance"],
                                  "pass" if r["passed"] else "fail"] for r in crit]))
    except ConfigError:
        raise
    except PipelineFailure as e:
        out.files.clear()
        out.json("report.json", envelope(cfg, {"failed": [str(e)], "provenance": e.where}))
        out.flush()
        say(f"failure in {e.where}: {e.error!r}")
        return EXIT_FAILED
    for p in out.flush():
        say(f"wrote {p}")
    for f in failed:
        say(f"FAILED {f}")
    return EXIT_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdslab", description="Random dynamical systems laboratory.")
    p.add_argument("pipeline", choices=PIPELINES)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--criterion", action="append", help="acceptance criterion by name or number (repeatable)")
    p.add_argument("--system", help="built-in system name when no config is given")
    return p


def make_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        d = cfg.to_dict()
        if d["pipeline"] != args.pipeline:
            raise ConfigError(f"config pipeline {d['pipeline']!r} does not match subcommand {args.pipeline!r}")
        if args.system:
            d["system"] = {"name": args.system}
    else:
        d = {"system": {"name": args.system or DEFAULT_SYSTEM[args.pipeline]}, "pipeline": args.pipeline,
             "output": "out"}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["output"] = args.out
    if args.criterion:
        if args.pipeline != "verify":
            raise ConfigError("--criterion only applies to verify")
        from .acceptance import resolve
        try:
            resolve(args.criterion)
        except KeyError as e:
            raise ConfigError(str(e)) from None
        d["criteria"] = list(args.criterion)
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = make_config(args)
        if cfg.criteria:
            from .acceptance import resolve
            resolve(cfg.criteria)
    except (ConfigError, KeyError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
