"""Tiny weight-shared convolutional encoder trained from scratch."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, conv2d, relu


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    kernel: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have the same length")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError(f"invalid channel widths {self.widths}")
        if any(s <= 0 for s in self.strides):
            raise ValueError(f"invalid strides {self.strides}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd so padding preserves size")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        pad = self.kernel // 2
        for s in self.strides:
            h = (h + 2 * pad - self.kernel) // s + 1
            w = (w + 2 * pad - self.kernel) // s + 1
        return h, w


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: list[Tensor]
    biases: list[Tensor]
    rng_seed: int = 0
    layers: list = field(init=False, repr=False)

    def __post_init__(self):
        c_in = self.config.in_channels
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != c_in or b.shape != (w.shape[0],):
                raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            c_in = w.shape[0]
        self.layers = list(zip(self.weights, self.biases))

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
            self.rng_seed,
        )

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"w{i}"] = w.data
            out[f"b{i}"] = b.data
        return out

    def astype(self, dtype) -> "EncoderParams":
        cfg = EncoderConfig(
            self.config.in_channels, self.config.widths, self.config.strides,
            self.config.kernel, np.dtype(dtype).name,
        )
        return EncoderParams(
            cfg,
            [Tensor(w.data.astype(dtype), requires_grad=True) for w in self.weights],
            [Tensor(b.data.astype(dtype), requires_grad=True) for b in self.biases],
            self.rng_seed,
        )


def init_encoder(seed: int, config: EncoderConfig | None = None) -> EncoderParams:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases from a seeded generator."""
    config = config or EncoderConfig()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    weights, biases = [], []
    c_in = config.in_channels
    for c_out in config.widths:
        fan_in = c_in * config.kernel * config.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, config.kernel, config.kernel))
        weights.append(Tensor(w.astype(dtype), requires_grad=True))
        biases.append(Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))
        c_in = c_out
    return EncoderParams(config, weights, biases, seed)


def encode(params: EncoderParams, image) -> Tensor:
    """Features for one 3×H×W image or a B×3×H×W batch.

    Every block is conv + ReLU except the last, which stays linear.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=params.config.dtype))
    if x.data.dtype != np.dtype(params.config.dtype):
        x = Tensor(x.data.astype(params.config.dtype))
    h, w = x.shape[-2:]
    factor = params.config.downsample
    if x.data.ndim not in (3, 4) or x.shape[-3] != params.config.in_channels:
        raise ValueError(f"expected {params.config.in_channels}×H×W image, got {x.shape}")
    if h < 16 or w < 16 or h % factor or w % factor:
        raise ValueError(f"image {h}x{w} must be at least 16x16 and divisible by {factor}")
    pad = params.config.kernel // 2
    n_layers = len(params.layers)
    for i, ((wt, b), stride) in enumerate(zip(params.layers, params.config.strides)):
        x = conv2d(x, wt, b, stride=stride, padding=pad)
        if i < n_layers - 1:
            x = relu(x)
    return x
