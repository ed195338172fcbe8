"""Prototype extraction, cosine/softmax mask prediction and self-support refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NORM_EPS, Tensor, cosine_map, fgbg_softmax, masked_average


class DegenerateMaskError(ValueError):
    """A mask has no foreground weight at feature resolution."""


@dataclass
class PrototypePair:
    fg: Tensor
    bg: Tensor

    def swapped(self) -> "PrototypePair":
        return PrototypePair(self.bg, self.fg)


@dataclass
class PredictedMask:
    probs: Tensor  # 2×h×w, channel 0 is foreground

    @property
    def fg(self) -> Tensor:
        return self.probs[0]

    @property
    def hard(self) -> np.ndarray:
        p = self.probs.data
        return (p[0] >= p[1]).astype(np.uint8)


@dataclass(frozen=True)
class SSPConfig:
    fg_threshold: float = 0.7
    bg_threshold: float = 0.3
    gating: str = "soft"  # "soft": weight gated pixels by their probability; "hard": 0/1 weights
    guide_weight: float = 0.0  # share of the guide prototype fused into each refined half

    def __post_init__(self):
        if not 0.0 <= self.guide_weight <= 1.0:
            raise ValueError("guide_weight must lie in [0, 1]")
        if self.gating not in ("soft", "hard"):
            raise ValueError(f"unknown gating {self.gating!r}")
        if self.bg_threshold > self.fg_threshold:
            raise ValueError("bg_threshold must not exceed fg_threshold")


def map_prototype(features: Tensor, mask) -> PrototypePair:
    """Masked average pooling of foreground (mask) and background (1 - mask)."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=features.dtype)
    if m.shape != features.shape[1:]:
        raise ValueError(f"mask {m.shape} does not match feature map {features.shape[1:]}")
    if m.sum() <= NORM_EPS:
        raise DegenerateMaskError("mask has no foreground at feature resolution")
    return PrototypePair(masked_average(features, m), masked_average(features, 1.0 - m))


def map_prototype_safe(features: Tensor, mask) -> tuple[PrototypePair, bool]:
    """Like :func:`map_prototype` but an empty half falls back to the global average.

    Returns the pair and whether a fallback was needed.
    """
    m = np.asarray(mask, dtype=features.dtype)
    degenerate = False
    halves = []
    for w in (m, 1.0 - m):
        if w.sum() <= NORM_EPS:
            degenerate = True
            w = np.ones_like(m)
        halves.append(masked_average(features, w))
    return PrototypePair(*halves), degenerate


def predict_mask(features: Tensor, protos: PrototypePair, temperature: float) -> PredictedMask:
    fg_sim = cosine_map(features, protos.fg)
    bg_sim = cosine_map(features, protos.bg)
    return PredictedMask(fgbg_softmax(fg_sim, bg_sim, temperature))


def ssp_refine(
    query_features: Tensor,
    guide: PrototypePair,
    temperature: float,
    config: SSPConfig = SSPConfig(),
) -> PrototypePair:
    """Re-estimate prototypes from the query's own confident pixels.

    An initial prediction with ``guide`` is gated at the two thresholds; each
    gated region is pooled (weighted by its soft probability, or 0/1 in hard
    mode). An empty region keeps the matching half of ``guide``.
    """
    pred = predict_mask(query_features, guide, temperature)
    p_fg = pred.probs[0]
    p_bg = pred.probs[1]
    fg_gate = p_fg.data >= config.fg_threshold
    bg_gate = p_fg.data < config.bg_threshold
    if config.gating == "hard":
        fg_w, bg_w = fg_gate.astype(query_features.dtype), bg_gate.astype(query_features.dtype)
    else:
        fg_w, bg_w = p_fg * fg_gate.astype(query_features.dtype), p_bg * bg_gate.astype(query_features.dtype)
    fg = _fuse(guide.fg, masked_average(query_features, fg_w), config.guide_weight) if fg_gate.any() else guide.fg
    bg = _fuse(guide.bg, masked_average(query_features, bg_w), config.guide_weight) if bg_gate.any() else guide.bg
    return PrototypePair(fg, bg)


def _fuse(guide: Tensor, own: Tensor, w: float) -> Tensor:
    if w == 0.0:
        return own
    return guide * w + own * (1.0 - w)
