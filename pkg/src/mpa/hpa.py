"""Progressive augmentation: cumulative op chains, view generation, plateau scheduler."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

GEOMETRIC = ("hflip", "vflip", "rot90", "grid_shuffle")
PHOTOMETRIC = ("brightness", "hue")
OP_KINDS = ("hflip", "vflip", "rot90", "brightness", "hue", "grid_shuffle")
DEFAULT_LADDER = ("hflip", "brightness", "vflip", "hue", "rot90", "grid_shuffle")


@dataclass(frozen=True)
class AugOp:
    kind: str
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC

    @property
    def stage(self) -> int:
        # application order: plain geometric, then photometric, then grid shuffle
        if self.kind == "grid_shuffle":
            return 2
        return 1 if self.kind in PHOTOMETRIC else 0


@dataclass(frozen=True)
class AugConfig:
    ladder: tuple[str, ...] = DEFAULT_LADDER
    brightness_range: float = 0.3
    hue_range: float = 30.0
    grid_cells: tuple[int, ...] = (2, 3, 4)
    mode: str = "cumulative"  # "cumulative" | "replacement" | "simple"

    def __post_init__(self):
        if not self.ladder or len(set(self.ladder)) != len(self.ladder):
            raise ValueError("ladder must list distinct ops")
        for k in self.ladder:
            if k not in OP_KINDS:
                raise ValueError(f"unknown augmentation {k!r} in ladder")
        if self.mode not in ("cumulative", "replacement", "simple"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")

    @property
    def n_max(self) -> int:
        return len(self.ladder)


@dataclass(frozen=True)
class AugChain:
    level: int
    ops: tuple[AugOp, ...]

    def kinds(self) -> list[str]:
        return [op.kind for op in self.ops]

    def application_order(self) -> list[AugOp]:
        return sorted(self.ops, key=lambda op: op.stage)


@dataclass
class View:
    image: np.ndarray
    mask: np.ndarray
    chain: AugChain


@dataclass
class ViewSet:
    views: list[View]

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i) -> View:
        return self.views[i]


# primitive ops -------------------------------------------------------------


def _grid_permutation(h: int, w: int, cells: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column source indices of a block shuffle that is always a pixel permutation.

    The image is split into ``cells``×``cells`` blocks whose sizes differ by at
    most one pixel; blocks are only exchanged with blocks of identical shape,
    so sizes that do not divide evenly never lose or duplicate pixels.
    """
    rows = np.array_split(np.arange(h), cells)
    cols = np.array_split(np.arange(w), cells)
    rng = np.random.default_rng(seed)
    blocks = [(i, j) for i in range(cells) for j in range(cells)]
    by_shape: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, j in blocks:
        by_shape.setdefault((len(rows[i]), len(cols[j])), []).append((i, j))
    src_r = np.zeros((h, w), dtype=np.int64)
    src_c = np.zeros((h, w), dtype=np.int64)
    for shape in sorted(by_shape):
        group = by_shape[shape]
        perm = rng.permutation(len(group))
        for dst, k in zip(group, perm):
            src = group[k]
            rr, cc = np.meshgrid(rows[src[0]], cols[src[1]], indexing="ij")
            dr, dc = np.meshgrid(rows[dst[0]], cols[dst[1]], indexing="ij")
            src_r[dr, dc] = rr
            src_c[dr, dc] = cc
    return src_r, src_c


def _geometric(arr: np.ndarray, op: AugOp) -> np.ndarray:
    # arr is (..., H, W)
    if op.kind == "hflip":
        return arr[..., :, ::-1].copy()
    if op.kind == "vflip":
        return arr[..., ::-1, :].copy()
    if op.kind == "rot90":
        return np.rot90(arr, k=int(op.magnitude) or 1, axes=(-2, -1)).copy()
    h, w = arr.shape[-2:]
    src_r, src_c = _grid_permutation(h, w, int(op.magnitude), op.seed)
    return arr[..., src_r, src_c].copy()


def shift_hue(image: np.ndarray, degrees: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(np.moveaxis(image, 0, -1), 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + degrees / 360.0, 1.0)
    return np.moveaxis(hsv_to_rgb(hsv), -1, 0).astype(image.dtype)


def apply_aug(image: np.ndarray, mask: np.ndarray, op: AugOp) -> tuple[np.ndarray, np.ndarray]:
    """Apply one op; geometric ops move mask and image together, photometric ops skip the mask."""
    if op.geometric:
        return _geometric(image, op), _geometric(mask, op)
    if op.kind == "brightness":
        return np.clip(image + op.magnitude, 0.0, 1.0).astype(image.dtype), mask.copy()
    return shift_hue(image, op.magnitude), mask.copy()


def apply_chain(image: np.ndarray, mask: np.ndarray, chain: AugChain) -> tuple[np.ndarray, np.ndarray]:
    for op in chain.application_order():
        image, mask = apply_aug(image, mask, op)
    return image, mask


def apply_geometric(mask: np.ndarray, chain: AugChain) -> np.ndarray:
    """Only the geometric part of ``chain``, e.g. to map a support mask onto a view."""
    for op in chain.application_order():
        if op.geometric:
            mask = _geometric(mask, op)
    return mask


# chains and views ------------------------------------------------------------


def _draw_op(kind: str, rng: np.random.Generator, config: AugConfig) -> AugOp:
    seed = int(rng.integers(2**31 - 1))
    if kind == "brightness":
        return AugOp(kind, float(rng.uniform(-config.brightness_range, config.brightness_range)), seed)
    if kind == "hue":
        return AugOp(kind, float(rng.uniform(-config.hue_range, config.hue_range)), seed)
    if kind == "grid_shuffle":
        return AugOp(kind, float(rng.choice(config.grid_cells)), seed)
    if kind == "rot90":
        return AugOp(kind, 1.0, seed)
    return AugOp(kind, 0.0, seed)


def build_chain(level: int, seed: int, config: AugConfig = AugConfig()) -> AugChain:
    """Cumulative chain: the first ``level`` ladder ops with seeded magnitudes.

    The generator is consumed one draw set per ladder slot, so the chain at
    ``level`` is an exact prefix of the chain at ``level + 1`` for the same seed.
    """
    if not 1 <= level <= config.n_max:
        raise ValueError(f"level must be in [1, {config.n_max}], got {level}")
    rng = np.random.default_rng(seed)
    ops = tuple(_draw_op(kind, rng, config) for kind in config.ladder)
    return AugChain(level, ops[:level])


def view_chain(index: int, seed: int, config: AugConfig = AugConfig()) -> AugChain:
    """Chain for view ``index`` (1-based) under the configured strategy."""
    if config.mode == "cumulative":
        return build_chain(index, seed, config)
    if config.mode == "simple":
        return build_chain(1, seed, config)
    full = build_chain(index, seed, config)
    return AugChain(index, (full.ops[-1],))


def view_seed(seed: int, index: int) -> int:
    return seed ^ index


def generate_views(
    support_image: np.ndarray,
    support_mask: np.ndarray,
    n: int,
    seed: int,
    config: AugConfig = AugConfig(),
    start: int = 1,
) -> ViewSet:
    """Views ``start``..``n``; view i uses chain i seeded with ``seed ^ i``."""
    if not 1 <= n <= config.n_max:
        raise ValueError(f"n must be in [1, {config.n_max}], got {n}")
    views = []
    for i in range(start, n + 1):
        chain = view_chain(i, view_seed(seed, i), config)
        img, msk = apply_chain(support_image, support_mask, chain)
        views.append(View(img, msk, chain))
    return ViewSet(views)


# plateau scheduler -----------------------------------------------------------


@dataclass(frozen=True)
class SchedulerConfig:
    n_max: int = 6
    patience: int = 3
    delta: float = 1e-4
    progressive: bool = True
    fixed_n: int = 1

    def __post_init__(self):
        if self.n_max < 1 or self.patience < 1 or not 1 <= self.fixed_n <= self.n_max:
            raise ValueError("invalid scheduler configuration")


@dataclass
class SchedulerState:
    current_n: int = 1
    stagnation_count: int = 0
    best_metric: float = -np.inf
    epoch: int = 0
    increments: list[int] = field(default_factory=list)


def scheduler_step(state: SchedulerState, epoch_metric: float, config: SchedulerConfig = SchedulerConfig()) -> SchedulerState:
    """One epoch of the plateau rule; returns a new state.

    After ``patience`` consecutive epochs without beating the best metric by
    more than ``delta``, one harder view is added (up to ``n_max``).
    """
    s = replace(state, increments=list(state.increments), epoch=state.epoch + 1)
    if epoch_metric > s.best_metric + config.delta:
        s.best_metric = epoch_metric
        s.stagnation_count = 0
        return s
    s.stagnation_count += 1
    if s.stagnation_count >= config.patience and s.current_n < config.n_max and config.progressive:
        s.current_n += 1
        s.stagnation_count = 0
        s.best_metric = epoch_metric
        s.increments.append(s.epoch)
    return s
