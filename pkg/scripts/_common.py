"""Shared argument handling for the experiment scripts."""
from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from mpa.config import ExperimentConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def parse(description: str, default_config: str) -> tuple[ExperimentConfig, argparse.Namespace]:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(CONFIGS / default_config))
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None, help="override the episode count (quick looks)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    if args.episodes:
        cfg = replace(cfg, episodes=args.episodes)
    return cfg.validate(), args


def fmt_row(name: str, values, width: int = 8) -> str:
    cells = (f"{v:>{width}d}" if isinstance(v, int) else f"{v:>{width}.2f}" for v in values)
    return f"{name:<24}" + "".join(cells)
