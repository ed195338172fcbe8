"""Dual-chain multi-view prediction, loss assembly, K-shot pooling and the adaptation loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add_all, backward, bce_loss, downsample_mask, stack_mean
from .encoder import EncoderParams, encode
from .hpa import (
    AugConfig,
    SchedulerConfig,
    SchedulerState,
    View,
    generate_views,
    scheduler_step,
)
from .proto_seg import (
    PredictedMask,
    PrototypePair,
    SSPConfig,
    map_prototype,
    map_prototype_safe,
    predict_mask,
    ssp_refine,
)

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    """Adaptation diverged (non-finite loss)."""


class ConfigurationError(ValueError):
    """An episode or config cannot be adapted at all."""


@dataclass(frozen=True)
class LossWeights:
    lambda_bs: float = 0.2
    lambda_seq: float = 0.1
    lambda_s_par: float = 0.4
    lambda_q_par: float = 1.0

    def __post_init__(self):
        if min(self.lambda_bs, self.lambda_seq, self.lambda_s_par, self.lambda_q_par) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_bs: Tensor
    l_q_seq: list[Tensor]  # view indices 2..N
    l_s_seq: list[Tensor]
    l_q_par: list[Tensor]  # view indices 1..N
    l_s_par: list[Tensor]
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "l_bs": self.l_bs.item(),
            "l_q_seq": [t.item() for t in self.l_q_seq],
            "l_s_seq": [t.item() for t in self.l_s_seq],
            "l_q_par": [t.item() for t in self.l_q_par],
            "l_s_par": [t.item() for t in self.l_s_par],
            "total": self.total.item(),
        }


@dataclass
class Episode:
    supports: list[tuple[np.ndarray, np.ndarray]]
    eval_queries: list[tuple[np.ndarray, np.ndarray]]
    category_id: int = 0
    domain_id: int = 0
    sample_seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.supports:
            raise ValueError("an episode needs at least one support pair")


@dataclass
class ChainResult:
    """Per-view outputs of one prediction chain (lists are indexed from view 1)."""

    l_q: list[Tensor]
    l_s: list[Tensor]
    q_preds: list[PredictedMask]
    s_preds: list[PredictedMask]
    q_protos: list[PrototypePair]
    s_protos: list[PrototypePair]
    fallbacks: int = 0


# chains ------------------------------------------------------------------------


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def kshot_prototype(support_features_masks: Sequence[tuple[Tensor, np.ndarray]]) -> PrototypePair:
    """Average of the per-support masked-average prototypes."""
    if not support_features_masks:
        raise ValueError("kshot_prototype needs K >= 1 supports")
    pairs = [map_prototype(f, m) for f, m in support_features_masks]
    return PrototypePair(stack_mean([p.fg for p in pairs]), stack_mean([p.bg for p in pairs]))


def _support_guide(feats: list[Tensor], masks: list[np.ndarray]) -> tuple[PrototypePair, int]:
    pairs, fallbacks = [], 0
    for f, m in zip(feats, masks):
        pair, degenerate = map_prototype_safe(f, m)
        fallbacks += degenerate
        pairs.append(pair)
    if fallbacks:
        log.warning("support mask degenerate at feature resolution; using global-average prototype")
    return PrototypePair(stack_mean([p.fg for p in pairs]), stack_mean([p.bg for p in pairs])), fallbacks


def _reverse(
    feats: list[Tensor],
    masks: list[np.ndarray],
    query_protos: PrototypePair,
    temperature: float,
    ssp: SSPConfig,
) -> tuple[Tensor, PredictedMask, PrototypePair]:
    # one reverse prediction per support; losses and prototypes are averaged over K
    losses, preds, protos = [], [], []
    for f, m in zip(feats, masks):
        p = ssp_refine(f, query_protos, temperature, ssp)
        pred = predict_mask(f, p, temperature)
        losses.append(bce_loss(pred.fg, m))
        preds.append(pred)
        protos.append(p)
    pair = PrototypePair(stack_mean([p.fg for p in protos]), stack_mean([p.bg for p in protos]))
    return stack_mean(losses), preds[0], pair


def sequential_chain(
    support_features,
    support_masks,
    views_features: Sequence[tuple[Tensor, np.ndarray]],
    temperature: float,
    ssp: SSPConfig = SSPConfig(),
) -> ChainResult:
    """Thread the support prototype view to view; each step predicts the view and the support back.

    ``support_features``/``support_masks`` are one feature map and its mask at
    feature resolution, or lists of K of them.
    """
    feats, masks = _as_list(support_features), _as_list(support_masks)
    if not views_features:
        raise ValueError("sequential_chain needs at least one view")
    guide, fallbacks = _support_guide(feats, masks)
    out = ChainResult([], [], [], [], [], [], fallbacks)
    for f_q, m_q in views_features:
        p_q = ssp_refine(f_q, guide, temperature, ssp)
        pred_q = predict_mask(f_q, p_q, temperature)
        l_s, pred_s, guide = _reverse(feats, masks, p_q, temperature, ssp)
        out.l_q.append(bce_loss(pred_q.fg, m_q))
        out.l_s.append(l_s)
        out.q_preds.append(pred_q)
        out.s_preds.append(pred_s)
        out.q_protos.append(p_q)
        out.s_protos.append(guide)
    return out


def parallel_chain(
    support_features,
    support_masks,
    views_features: Sequence[tuple[Tensor, np.ndarray]],
    temperature: float,
    ssp: SSPConfig = SSPConfig(),
) -> ChainResult:
    """Predict every view from the support prototype independently, plus the reverse step."""
    feats, masks = _as_list(support_features), _as_list(support_masks)
    if not views_features:
        raise ValueError("parallel_chain needs at least one view")
    guide, fallbacks = _support_guide(feats, masks)
    out = ChainResult([], [], [], [], [], [], fallbacks)
    for f_q, m_q in views_features:
        p_q = ssp_refine(f_q, guide, temperature, ssp)
        pred_q = predict_mask(f_q, p_q, temperature)
        l_s, pred_s, p_s = _reverse(feats, masks, p_q, temperature, ssp)
        out.l_q.append(bce_loss(pred_q.fg, m_q))
        out.l_s.append(l_s)
        out.q_preds.append(pred_q)
        out.s_preds.append(pred_s)
        out.q_protos.append(p_q)
        out.s_protos.append(p_s)
    return out


def base_loss(support_features, support_masks, temperature: float) -> Tensor:
    """Support segmented by its own (K-averaged) prototype."""
    feats, masks = _as_list(support_features), _as_list(support_masks)
    guide, _ = _support_guide(feats, masks)
    return stack_mean([bce_loss(predict_mask(f, guide, temperature).fg, m) for f, m in zip(feats, masks)])


def assemble_total(
    l_bs: Tensor,
    l_q_seq: Sequence[Tensor],
    l_s_seq: Sequence[Tensor],
    l_q_par: Sequence[Tensor],
    l_s_par: Sequence[Tensor],
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Weighted total. Sequential lists hold view indices 2..N, parallel lists 1..N."""
    if len(l_q_seq) != len(l_s_seq):
        raise ValueError("sequential query/support lists differ in length")
    if len(l_q_par) != len(l_s_par):
        raise ValueError("parallel query/support lists differ in length")
    dtype = l_bs.dtype
    seq = add_all((q + s for q, s in zip(l_q_seq, l_s_seq)), dtype)
    total = (
        l_bs * weights.lambda_bs
        + seq * weights.lambda_seq
        + add_all(l_s_par, dtype) * weights.lambda_s_par
        + add_all(l_q_par, dtype) * weights.lambda_q_par
    )
    return LossBreakdown(l_bs, list(l_q_seq), list(l_s_seq), list(l_q_par), list(l_s_par), total)


# adaptation --------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptConfig:
    max_epochs: int = 200
    lr: float = 5e-4
    optimizer: str = "sgd"  # "sgd" | "momentum" | "adam"
    momentum: float = 0.9
    temperature: float = 20.0
    weights: LossWeights = LossWeights()
    ssp: SSPConfig = SSPConfig()
    aug: AugConfig = AugConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    # "progressive": views 1..n; "single": only view n; "fixed": views 1..scheduler.fixed_n
    view_mode: str = "progressive"
    sequential_on: bool = True
    parallel_on: bool = True
    metric: str = "neg_loss"  # "neg_loss" | "view_iou"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0 or self.lr <= 0 or self.temperature <= 0:
            raise ValueError("invalid adaptation hyper-parameters")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.view_mode not in ("progressive", "single", "fixed"):
            raise ValueError(f"unknown view_mode {self.view_mode!r}")
        if self.metric not in ("neg_loss", "view_iou"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.scheduler.n_max > self.aug.n_max:
            raise ValueError("scheduler n_max exceeds the augmentation ladder")
        if not (self.sequential_on or self.parallel_on):
            raise ValueError("at least one prediction chain must be enabled")


@dataclass
class AdaptationLog:
    records: list[dict] = field(default_factory=list)
    view_source: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def current_n_trace(self) -> list[int]:
        return [r["current_n"] for r in self.records]

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.records]

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class _Optimizer:
    def __init__(self, params: list[Tensor], cfg: AdaptConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if cfg.optimizer == "sgd":
                p.data = p.data - cfg.lr * g
            elif cfg.optimizer == "momentum":
                self.m[i] = cfg.momentum * self.m[i] + g
                p.data = p.data - cfg.lr * self.m[i]
            else:
                b1, b2 = 0.9, 0.999
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                m_hat = self.m[i] / (1 - b1**self.t)
                v_hat = self.v[i] / (1 - b2**self.t)
                p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-8)).astype(p.data.dtype)


def _check_support_masks(supports) -> None:
    for i, (_, m) in enumerate(supports):
        m = np.asarray(m)
        if m.sum() == 0 or m.sum() == m.size:
            raise ConfigurationError(f"support mask {i} has no foreground or no background")


def _active_indices(state: SchedulerState, cfg: AdaptConfig) -> list[int]:
    if cfg.view_mode == "progressive":
        return list(range(1, state.current_n + 1))
    if cfg.view_mode == "single":
        return [state.current_n]
    return list(range(1, cfg.scheduler.fixed_n + 1))


def _soft_iou(pred: PredictedMask, target: np.ndarray) -> float:
    hard = pred.hard.astype(bool)
    gt = target >= 0.5
    union = (hard | gt).sum()
    return 1.0 if union == 0 else float((hard & gt).sum() / union)


def mpa_loss(
    encoder: EncoderParams,
    supports: Sequence[tuple[np.ndarray, np.ndarray]],
    views: Sequence[View],
    cfg: AdaptConfig,
) -> tuple[LossBreakdown, dict]:
    """Full weighted loss for K supports and the given views (one shared encoder pass)."""
    dtype = np.dtype(encoder.config.dtype)
    images = [s[0] for s in supports] + [v.image for v in views]
    batch = np.stack(images).astype(dtype)
    feats = encode(encoder, batch)
    h, w = feats.shape[-2:]
    k = len(supports)
    s_feats = [feats[i] for i in range(k)]
    s_masks = [downsample_mask(m, h, w).astype(dtype) for _, m in supports]
    v_feats = [(feats[k + i], downsample_mask(v.mask, h, w).astype(dtype)) for i, v in enumerate(views)]

    l_bs = base_loss(s_feats, s_masks, cfg.temperature)
    info = {"fallbacks": 0, "view_iou": []}
    l_q_par: list[Tensor] = []
    l_s_par: list[Tensor] = []
    l_q_seq: list[Tensor] = []
    l_s_seq: list[Tensor] = []
    if cfg.parallel_on:
        par = parallel_chain(s_feats, s_masks, v_feats, cfg.temperature, cfg.ssp)
        l_q_par, l_s_par = par.l_q, par.l_s
        info["fallbacks"] += par.fallbacks
        info["view_iou"] = [_soft_iou(p, m) for p, (_, m) in zip(par.q_preds, v_feats)]
    if cfg.sequential_on and (len(views) > 1 or not cfg.parallel_on):
        # index-1 sequential terms duplicate the parallel ones and are left out
        seq = sequential_chain(s_feats, s_masks, v_feats, cfg.temperature, cfg.ssp)
        l_q_seq, l_s_seq = seq.l_q[1:], seq.l_s[1:]
        info["fallbacks"] += seq.fallbacks
        if not info["view_iou"]:
            info["view_iou"] = [_soft_iou(p, m) for p, (_, m) in zip(seq.q_preds, v_feats)]
    breakdown = assemble_total(l_bs, l_q_seq, l_s_seq, l_q_par, l_s_par, cfg.weights)
    return breakdown, info


def adapt_episode(
    episode: Episode,
    encoder: EncoderParams,
    config: AdaptConfig = AdaptConfig(),
) -> tuple[EncoderParams, AdaptationLog]:
    """Fine-tune a copy of ``encoder`` on the episode's supports only."""
    _check_support_masks(episode.supports)
    cfg = config
    enc = encoder.astype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    k = len(episode.supports)
    source = int(rng.integers(k)) if k > 1 else 0
    run_log = AdaptationLog(view_source=source)
    if cfg.max_epochs == 0:
        return enc, run_log

    src_img, src_mask = episode.supports[source]
    sched_cfg = cfg.scheduler
    if cfg.view_mode == "fixed":
        state = SchedulerState(current_n=sched_cfg.fixed_n)
        sched_cfg = SchedulerConfig(sched_cfg.n_max, sched_cfg.patience, sched_cfg.delta, False, sched_cfg.fixed_n)
    else:
        state = SchedulerState(current_n=1)
    view_seed = int(rng.integers(2**31 - 1))
    cache: dict[int, View] = {}
    opt = _Optimizer(enc.parameters(), cfg)

    for epoch in range(cfg.max_epochs):
        wanted = _active_indices(state, cfg)
        missing = [i for i in wanted if i not in cache]
        if missing:
            # views are frozen once drawn; only newly unlocked indices are generated
            for i in missing:
                cache[i] = generate_views(src_img, src_mask, i, view_seed, cfg.aug, start=i)[0]
        views = [cache[i] for i in wanted]

        enc.zero_grad()
        breakdown, info = mpa_loss(enc, episode.supports, views, cfg)
        total = breakdown.total.item()
        if not np.isfinite(total):
            raise AdaptationError(
                f"non-finite loss at epoch {epoch}: {breakdown.as_floats()} (n_views={len(views)})"
            )
        backward(breakdown.total)
        opt.step()

        metric = -total if cfg.metric == "neg_loss" else float(np.mean(info["view_iou"]))
        state = scheduler_step(state, metric, sched_cfg)
        record = {"epoch": epoch, **breakdown.as_floats()}
        record.update(
            current_n=state.current_n,
            stagnation_count=state.stagnation_count,
            n_views=len(views),
            metric=metric,
            fallbacks=info["fallbacks"],
        )
        run_log.records.append(record)
    return enc, run_log


# inference ---------------------------------------------------------------------


def upsample_nearest(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = mask.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return mask[rows[:, None], cols[None, :]]


@dataclass
class Segmentation:
    pred: PredictedMask  # at feature resolution
    hard: np.ndarray  # nearest-neighbour upsampled to the query size


def infer(
    encoder: EncoderParams,
    supports: Sequence[tuple[np.ndarray, np.ndarray]],
    query_image: np.ndarray,
    temperature: float = 20.0,
    ssp: SSPConfig = SSPConfig(),
    swap_prototypes: bool = False,
) -> Segmentation:
    """Support-to-query prediction: K-averaged prototype, one SSP step on the query."""
    _check_support_masks(supports)
    enc = frozen(encoder)
    dtype = np.dtype(enc.config.dtype)
    batch = np.stack([s[0] for s in supports] + [query_image]).astype(dtype)
    feats = encode(enc, batch)
    h, w = feats.shape[-2:]
    pairs = [(feats[i], downsample_mask(m, h, w).astype(dtype)) for i, (_, m) in enumerate(supports)]
    guide = kshot_prototype(pairs)
    if swap_prototypes:
        guide = guide.swapped()
    f_q = feats[len(supports)]
    pred = predict_mask(f_q, ssp_refine(f_q, guide, temperature, ssp), temperature)
    return Segmentation(pred, upsample_nearest(pred.hard, *query_image.shape[-2:]))


def frozen(encoder: EncoderParams) -> EncoderParams:
    """Same weights without gradient tracking (no copy)."""
    return EncoderParams(
        encoder.config,
        [Tensor(w.data) for w in encoder.weights],
        [Tensor(b.data) for b in encoder.biases],
        encoder.rng_seed,
    )


def config_dict(cfg: AdaptConfig) -> dict:
    return asdict(cfg)
