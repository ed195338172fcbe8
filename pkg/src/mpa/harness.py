"""Experiment runner: adaptation + evaluation, preliminary difficulty tables, ablations."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .autodiff import downsample_mask
from .config import ExperimentConfig
from .dmp import (
    AdaptationError,
    Episode,
    adapt_episode,
    frozen,
    infer,
    sequential_chain,
    upsample_nearest,
)
from .encoder import encode, init_encoder
from .hpa import DEFAULT_LADDER, AugChain, AugConfig, apply_chain, build_chain
from .synthbench import sample_episode

log = logging.getLogger(__name__)

INVERSION_TOL = 1.0  # IoU points
REPORT_KEYS = (
    "kind", "config", "episodes", "aggregate", "per_view_iou", "sequential_iou",
    "tab1_rows", "loss_curve", "scheduler_trace", "cells", "verdicts", "wall_clock",
)
TAB1_ROWS = (("flip",), ("flip", "hue"), ("flip", "hue", "brightness"))
SEQ_POSITIONS = (1, 3, 6)


def fg_iou(pred, gt) -> float:
    """Foreground IoU; 1 when both masks are empty, 0 when exactly one is."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


# episodes ---------------------------------------------------------------------


def build_episode(cfg: ExperimentConfig, index: int, k: int | None = None) -> tuple[str, Episode]:
    """Episodes rotate over the configured domains; categories rotate within a domain."""
    specs = cfg.domain_specs()
    spec = specs[index % len(specs)]
    category = (index // len(specs)) % cfg.n_categories
    ep = sample_episode(spec, category, k or cfg.k_shot, cfg.n_eval,
                        seed=cfg.episode_seed * 100_003 + index, domain_id=index % len(specs))
    return spec.name, ep


def build_episodes(cfg: ExperimentConfig, k: int | None = None) -> list[tuple[str, Episode]]:
    return [build_episode(cfg, e, k) for e in range(cfg.episodes)]


def _run_seed(seed: int, episode: int) -> int:
    return seed * 10_007 + episode


# evaluation ---------------------------------------------------------------------


def episode_miou(encoder, episode: Episode, temperature: float, ssp) -> float:
    ious = [fg_iou(infer(encoder, episode.supports, img, temperature, ssp).hard, m)
            for img, m in episode.eval_queries]
    return float(np.mean(ious))


def _tab1_chain(kinds: tuple[str, ...], seed: int, aug: AugConfig) -> AugChain:
    # fixed-op rows draw seeded magnitudes from the full default ladder, whatever the configured one
    full_aug = replace(aug, ladder=DEFAULT_LADDER)
    full = {op.kind: op for op in build_chain(full_aug.n_max, seed, full_aug).ops}
    names = {"flip": "hflip"}
    return AugChain(len(kinds), tuple(full[names.get(k, k)] for k in kinds))


def difficulty_tables(encoder, support, n_max: int, draws: int, seed: int, temperature: float, ssp, aug: AugConfig) -> dict:
    """Support→view IoU per chain level, the three paper-style rows, and sequential-chain IoU per position."""
    img_s, mask_s = support
    per_level = np.zeros((draws, n_max))
    per_pos = np.zeros((draws, n_max))
    rows = np.zeros((draws, len(TAB1_ROWS)))
    enc = frozen(encoder)
    dtype = np.dtype(enc.config.dtype)
    cum = replace(aug, mode="cumulative")
    for d in range(draws):
        dseed = 9_999_991 * (d + 1) + seed
        views = [apply_chain(img_s, mask_s, build_chain(level, dseed ^ level, cum)) for level in range(1, n_max + 1)]
        for i, (vi, vm) in enumerate(views):
            per_level[d, i] = fg_iou(infer(encoder, [support], vi, temperature, ssp).hard, vm)
        for r, kinds in enumerate(TAB1_ROWS):
            vi, vm = apply_chain(img_s, mask_s, _tab1_chain(kinds, dseed, cum))
            rows[d, r] = fg_iou(infer(encoder, [support], vi, temperature, ssp).hard, vm)
        feats = encode(enc, np.stack([img_s] + [v[0] for v in views]).astype(dtype))
        h, w = feats.shape[-2:]
        chain = sequential_chain(
            feats[0], downsample_mask(mask_s, h, w).astype(dtype),
            [(feats[i + 1], downsample_mask(v[1], h, w).astype(dtype)) for i, v in enumerate(views)],
            temperature, ssp,
        )
        for i, pred in enumerate(chain.q_preds):
            per_pos[d, i] = fg_iou(upsample_nearest(pred.hard, *mask_s.shape), views[i][1])
    return {
        "per_level": per_level.mean(axis=0).tolist(),
        "per_position": per_pos.mean(axis=0).tolist(),
        "tab1_rows": rows.mean(axis=0).tolist(),
    }


def run_episode(cfg_dict: dict, cell: str, seed: int, index: int, shots: int | None = None) -> dict:
    """Adapt on one episode and evaluate it. Module-level so worker processes can pickle it.

    With ``shots`` the episode is drawn with ``cfg.k_shot`` supports and only
    the first ``shots`` are used, so different K share queries and supports.
    """
    cfg = ExperimentConfig.from_dict(cfg_dict)
    domain, ep = build_episode(cfg, index)
    if shots is not None:
        ep = Episode(ep.supports[:shots], ep.eval_queries, ep.category_id, ep.domain_id, ep.sample_seeds)
    run_seed = _run_seed(seed, index)
    acfg = cfg.adapt_config(run_seed)
    row = {"cell": cell, "seed": seed, "episode": index, "domain": domain, "category": ep.category_id,
           "status": "ok", "fg_iou": float("nan"), "final_loss": float("nan"), "final_n": 0,
           "increments": [], "loss_trace": [], "n_trace": [], "error": ""}
    encoder = init_encoder(run_seed, cfg.encoder_config())
    try:
        adapted, alog = adapt_episode(ep, encoder, acfg)
    except AdaptationError as exc:
        row.update(status="aborted", error=str(exc))
        return row
    row["fg_iou"] = episode_miou(adapted, ep, acfg.temperature, acfg.ssp)
    if alog.records:
        trace = alog.current_n_trace
        row.update(final_loss=alog.totals[-1], final_n=trace[-1], loss_trace=alog.totals, n_trace=trace,
                   increments=[i for i in range(1, len(trace)) if trace[i] > trace[i - 1]])
    log.info("%s seed=%d episode=%d fg_iou=%.3f", cell, seed, index, row["fg_iou"])
    if shots is None and cfg.eval_view_draws > 0:
        row.update(difficulty_tables(adapted, ep.supports[alog.view_source], acfg.aug.n_max,
                                     cfg.eval_view_draws, run_seed, acfg.temperature, acfg.ssp, acfg.aug))
    return row


def _execute(jobs: list[tuple], workers: int) -> list[dict]:
    if workers <= 1:
        rows = [run_episode(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_episode, *zip(*jobs)))
    return rows


# aggregation --------------------------------------------------------------------


def _mean_trace(traces: list[list[float]]) -> list[float]:
    traces = [t for t in traces if t]
    if not traces:
        return []
    n = min(len(t) for t in traces)
    return np.mean([t[:n] for t in traces], axis=0).tolist()


def aggregate(rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    ious = np.array([r["fg_iou"] for r in ok]) * 100.0
    n_fail = len(rows) - len(ok)
    return {
        "miou": float(ious.mean()) if ok else float("nan"),
        "miou_std": float(ious.std()) if ok else float("nan"),
        "n_ok": len(ok),
        "n_failed": n_fail,
        "failure_rate": n_fail / max(len(rows), 1),
    }


def _table(rows: list[dict], key: str) -> dict:
    ok = [r[key] for r in rows if r["status"] == "ok" and key in r]
    if not ok:
        return {"mean": [], "std": []}
    arr = np.array(ok) * 100.0
    return {"mean": arr.mean(axis=0).tolist(), "std": arr.std(axis=0).tolist()}


def non_increasing(values: list[float], tol: float = INVERSION_TOL) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))


def _public_row(r: dict) -> dict:
    return {k: v for k, v in r.items() if k not in ("loss_trace", "n_trace")}


def build_report(kind: str, cfg: ExperimentConfig, rows: list[dict], cells: dict, verdicts: dict,
                 wall: float, main_cell: str | None = None) -> dict:
    """Fixed field set for every experiment kind; tables come from ``main_cell`` (default: first row's cell)."""
    if main_cell is None and rows:
        main_cell = rows[0]["cell"]
    main = [r for r in rows if r["cell"] == main_cell]
    per_level = _table(main, "per_level")
    per_pos = _table(main, "per_position")
    report = {
        "kind": kind,
        "config": cfg.to_dict(),
        "episodes": [_public_row(r) for r in rows],
        "aggregate": aggregate(main),
        "per_view_iou": {"levels": list(range(1, cfg.hpa.n_max + 1)), **per_level},
        "sequential_iou": {"positions": list(range(1, cfg.hpa.n_max + 1)), **per_pos},
        "tab1_rows": {"rows": ["+".join(r) for r in TAB1_ROWS], **_table(main, "tab1_rows")},
        "loss_curve": {cell: _mean_trace([r["loss_trace"] for r in rows if r["cell"] == cell])
                       for cell in sorted({r["cell"] for r in rows})},
        "scheduler_trace": {cell: _mean_trace([r["n_trace"] for r in rows if r["cell"] == cell])
                            for cell in sorted({r["cell"] for r in rows})},
        "cells": cells,
        "verdicts": verdicts,
        "wall_clock": wall,
    }
    assert tuple(report) == REPORT_KEYS
    return report


# experiments ---------------------------------------------------------------------


def run_adaptation(cfg: ExperimentConfig, cell: str = "main") -> dict:
    """Adapt and evaluate every (seed, episode); mIoU is mean fg-IoU × 100 over successful runs."""
    t0 = time.perf_counter()
    jobs = [(cfg.to_dict(), cell, s, e) for s in cfg.seeds for e in range(cfg.episodes)]
    rows = _execute(jobs, cfg.workers)
    for r in rows:
        if r["status"] != "ok":
            log.warning("episode %s seed %s aborted: %s", r["episode"], r["seed"], r["error"])
    agg = aggregate(rows)
    return build_report("adapt", cfg, rows, {cell: agg}, {}, time.perf_counter() - t0)


def run_evaluation(cfg: ExperimentConfig) -> dict:
    """Zero-epoch baseline: the randomly initialised encoder evaluated as is."""
    base = replace(cfg, dmp=replace(cfg.dmp, epochs=0))
    report = run_adaptation(base, cell="no_adaptation")
    report["kind"] = "eval"
    return report


def run_preliminary_tables(cfg: ExperimentConfig) -> dict:
    """Difficulty by chain level (per level and paper-style rows) and by sequential position."""
    report = run_adaptation(cfg, cell="prelim")
    report["kind"] = "prelim"
    levels = report["per_view_iou"]["mean"]
    positions = report["sequential_iou"]["mean"]
    rows = report["tab1_rows"]["mean"]
    picks = [positions[p - 1] for p in SEQ_POSITIONS if p <= len(positions)]
    report["verdicts"] = {
        "levels_non_increasing": non_increasing(levels),
        "tab1_rows_non_increasing": non_increasing(rows),
        "sequential_positions": [p for p in SEQ_POSITIONS if p <= len(positions)],
        "sequential_values": picks,
        "sequential_non_increasing": non_increasing(picks),
    }
    return report


ABLATION_CELLS = {
    "baseline": dict(hpa_on=False, dmp_sequential_on=False, view_mode="fixed", aug_mode="cumulative"),
    "hpa": dict(hpa_on=True, dmp_sequential_on=False, view_mode="progressive", aug_mode="cumulative"),
    "hpa_dmp": dict(hpa_on=True, dmp_sequential_on=True, view_mode="progressive", aug_mode="cumulative"),
    "always_1_view": dict(hpa_on=True, dmp_sequential_on=True, view_mode="single", aug_mode="cumulative"),
    "always_simple": dict(hpa_on=True, dmp_sequential_on=True, view_mode="progressive", aug_mode="simple"),
    "replacement": dict(hpa_on=True, dmp_sequential_on=True, view_mode="progressive", aug_mode="replacement"),
}


def cell_config(cfg: ExperimentConfig, cell: str) -> ExperimentConfig:
    o = ABLATION_CELLS[cell]
    ablation = replace(cfg.ablation, hpa_on=o["hpa_on"], dmp_sequential_on=o["dmp_sequential_on"],
                       dmp_parallel_on=True, view_mode=o["view_mode"], fixed_n=1)
    return replace(cfg, ablation=ablation, hpa=replace(cfg.hpa, aug_mode=o["aug_mode"]))


def run_ablations(cfg: ExperimentConfig, cells: tuple[str, ...] = tuple(ABLATION_CELLS)) -> dict:
    """Every cell shares episodes, seeds and encoder initialisations."""
    t0 = time.perf_counter()
    jobs = []
    for cell in cells:
        cc = cell_config(cfg, cell).to_dict()
        jobs += [(cc, cell, s, e) for s in cfg.seeds for e in range(cfg.episodes)]
    rows = _execute(jobs, cfg.workers)
    table = {cell: aggregate([r for r in rows if r["cell"] == cell]) for cell in cells}
    m = {cell: table[cell]["miou"] for cell in cells}
    verdicts = {}
    if {"baseline", "hpa", "hpa_dmp"} <= set(m):
        verdicts["tab5_gaps"] = [m["hpa"] - m["baseline"], m["hpa_dmp"] - m["hpa"]]
        verdicts["tab5_ordering"] = m["hpa"] - m["baseline"] >= 1.0 and m["hpa_dmp"] - m["hpa"] >= 1.0
    if {"hpa_dmp", "always_1_view", "always_simple"} <= set(m):
        verdicts["tab6_margins"] = [m["hpa_dmp"] - m["always_1_view"], m["hpa_dmp"] - m["always_simple"]]
        verdicts["tab6_progressive_wins"] = min(verdicts["tab6_margins"]) >= 0.5
    if {"hpa_dmp", "replacement", "always_simple"} <= set(m):
        verdicts["tab7_ordering"] = m["hpa_dmp"] >= m["replacement"] >= m["always_simple"]
    return build_report("ablate", cfg, rows, table, verdicts, time.perf_counter() - t0, main_cell="hpa_dmp")


def run_kshot(cfg: ExperimentConfig, shots: tuple[int, ...] = (1, 5)) -> dict:
    """Same episodes (drawn with max(shots) supports) adapted with the first k supports."""
    t0 = time.perf_counter()
    ck = replace(cfg, k_shot=max(shots)).to_dict()
    jobs = [(ck, f"{k}-shot", s, e, k) for k in shots for s in cfg.seeds for e in range(cfg.episodes)]
    rows = _execute(jobs, cfg.workers)
    table = {f"{k}-shot": aggregate([r for r in rows if r["cell"] == f"{k}-shot"]) for k in shots}
    verdicts = {}
    if len(shots) >= 2:
        lo, hi = f"{min(shots)}-shot", f"{max(shots)}-shot"
        verdicts["kshot_gap"] = table[hi]["miou"] - table[lo]["miou"]
        verdicts["more_shots_not_worse"] = verdicts["kshot_gap"] >= -0.5
    return build_report("kshot", cfg, rows, table, verdicts, time.perf_counter() - t0)
