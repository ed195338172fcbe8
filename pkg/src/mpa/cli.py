"""Command line entry point: ``mpa {adapt,eval,prelim,ablate,kshot,gen-data}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig
from .report import write_report
from .synthbench import gen_sample, save_png, save_specs

EXIT_OK, EXIT_BAD_CONFIG, EXIT_FAILURES = 0, 2, 3
MAX_FAILURE_RATE = 0.10


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.precision is not None:
        cfg = replace(cfg, precision=args.precision)
    return cfg.validate()


def _summary(report: dict) -> str:
    lines = [f"{report['kind']}: " + ", ".join(
        f"{cell}={agg['miou']:.2f}±{agg['miou_std']:.2f} (n={agg['n_ok']})" for cell, agg in report["cells"].items()
    )]
    for key, value in report["verdicts"].items():
        lines.append(f"  {key}: {value}")
    return "\n".join(lines)


def gen_data(cfg: ExperimentConfig, per_domain: int = 4) -> Path:
    out = Path(cfg.output_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    specs = cfg.domain_specs()
    save_specs(specs, out / "domains.json")
    for d, spec in enumerate(specs):
        for i in range(per_domain):
            sample = gen_sample(spec, i % cfg.n_categories, cfg.episode_seed * 1000 + i, d)
            save_png(sample, out / "samples" / f"{spec.name}_{i:03d}.png")
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mpa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("adapt", "eval", "prelim", "ablate", "kshot", "gen-data"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    if args.command == "gen-data":
        out = gen_data(cfg)
        print(f"wrote samples to {out}")
        return EXIT_OK
    run = {
        "adapt": harness.run_adaptation,
        "eval": harness.run_evaluation,
        "prelim": harness.run_preliminary_tables,
        "ablate": harness.run_ablations,
        "kshot": harness.run_kshot,
    }[args.command]
    report = run(cfg)
    path = write_report(report, cfg.output_dir)
    print(_summary(report))
    print(f"report: {path}")
    worst = max(agg["failure_rate"] for agg in report["cells"].values())
    if worst > MAX_FAILURE_RATE:
        print(json.dumps({"failure_rate": worst}), file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
