"""Small dense tensor library with reverse-mode autodiff.

Only the operations the segmentation pipeline needs are provided. Heavy ops
(convolution, cosine maps, the two-way softmax, BCE, masked averaging) are
fused primitives with hand-written backward passes, which keeps the graph
short enough for thousands of adaptation steps on one CPU core.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

NORM_EPS = 1e-8
BCE_EPS = 1e-7


class Tensor:
    """Dense array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return _make(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return _make(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / scalar)

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            full[idx] += g
            self._accumulate(full)

        return _make(out_data, (self,), backward, "index")

    def sum(self) -> "Tensor":
        def backward(g):
            self._accumulate(np.broadcast_to(g, self.shape))

        return _make(np.asarray(self.data.sum()), (self,), backward, "sum")

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# graph traversal ------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Intermediate gradients are discarded and, unless ``retain_graph`` is set,
    the graph is cut so a second call cannot reuse freed buffers.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.is_leaf or node.grad is None:
            continue
        node._backward(node.grad)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


# fused primitives ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        x._accumulate(g * mask)

    return _make(out_data, (x,), bw, "relu")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is C×H×W or B×C×H×W."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"bad conv2d ranks: input {x.shape}, weight {weight.shape}")
    n, c_in, h, w = xd.shape
    c_out, c_w, k, k2 = weight.shape
    if c_w != c_in:
        raise ValueError(f"input has {c_in} channels but weight expects {c_w}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {h}x{w}+{padding}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns laid out (C·k·k, B·H'·W') so the output is one (C_out, ·) matmul
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c_in * k * k, n * h_out * w_out)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols + bias.data[:, None]
    out_data = out.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
    out_data = np.ascontiguousarray(out_data if batched else out_data[0])

    def bw(g):
        gd = g if batched else g[None]
        gmat = gd.transpose(1, 0, 2, 3).reshape(c_out, -1)
        if weight.requires_grad:
            weight._accumulate((gmat @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c_in, k, k, n, h_out, w_out)
            dxp = np.zeros((c_in, n) + xp.shape[2:], dtype=xp.dtype)
            span_h = stride * (h_out - 1) + 1
            span_w = stride * (w_out - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            x._accumulate(dx if batched else dx[0])

    return _make(out_data, (x, weight, bias), bw, "conv2d")


def cosine_map(features: Tensor, prototype: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-pixel cosine similarity between a C×H×W map and a C-vector."""
    f, p = features.data, prototype.data
    if f.ndim != 3 or p.ndim != 1:
        raise ValueError(f"cosine_map expects C×H×W and C, got {f.shape} and {p.shape}")
    if f.shape[0] != p.shape[0]:
        raise ValueError(f"channel mismatch: features {f.shape[0]}, prototype {p.shape[0]}")
    c, h, w = f.shape
    f2 = f.reshape(c, h * w)
    raw_fn = np.sqrt(np.einsum("ij,ij->j", f2, f2))
    raw_pn = float(np.sqrt(p @ p))
    fn = np.maximum(raw_fn, eps)
    pn = max(raw_pn, eps)
    flat = (p @ f2) / (fn * pn)
    out_data = flat.reshape(h, w)

    def bw(g):
        g = g.reshape(-1)
        scaled = g / (fn * pn)
        if features.requires_grad:
            live = raw_fn > eps
            gf = np.outer(p, scaled) - f2 * (g * flat * live / (fn * fn))
            features._accumulate(gf.reshape(c, h, w))
        if prototype.requires_grad:
            gp = f2 @ scaled
            if raw_pn > eps:
                gp = gp - p * (float(g @ flat) / (pn * pn))
            prototype._accumulate(gp)

    return _make(out_data, (features, prototype), bw, "cosine_map")


def fgbg_softmax(fg_sim: Tensor, bg_sim: Tensor, temperature: float) -> Tensor:
    """Two-way softmax over scaled (fg, bg) similarity maps; returns 2×H×W."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if fg_sim.shape != bg_sim.shape:
        raise ValueError(f"shape mismatch {fg_sim.shape} vs {bg_sim.shape}")
    d = temperature * (fg_sim.data - bg_sim.data)
    p_fg = expit(d)
    p_bg = expit(-d)
    out_data = np.stack([p_fg, p_bg])

    def bw(g):
        dd = (g[0] - g[1]) * p_fg * p_bg * temperature
        if fg_sim.requires_grad:
            fg_sim._accumulate(dd)
        if bg_sim.requires_grad:
            bg_sim._accumulate(-dd)

    return _make(out_data, (fg_sim, bg_sim), bw, "fgbg_softmax")


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy. ``target`` is a constant array in [0, 1]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {t.shape} differ")
    p = np.clip(pred.data, eps, 1.0 - eps)
    n = p.size
    out_data = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n)

    def bw(g):
        inside = (pred.data > eps) & (pred.data < 1.0 - eps)
        pred._accumulate(g * inside * (-t / p + (1.0 - t) / (1.0 - p)) / n)

    return _make(out_data, (pred,), bw, "bce")


def masked_average(features: Tensor, weights, eps: float = NORM_EPS) -> Tensor:
    """Σ_p F[:, p]·w[p] / max(Σ_p w[p], eps). ``weights`` may be constant or a Tensor."""
    w_t = weights if isinstance(weights, Tensor) else None
    w = weights.data if w_t is not None else np.asarray(weights, dtype=features.dtype)
    f = features.data
    if f.ndim != 3 or w.shape != f.shape[1:]:
        raise ValueError(f"mask {w.shape} does not match features {f.shape}")
    c = f.shape[0]
    f2 = f.reshape(c, -1)
    w1 = w.reshape(-1)
    total = float(w1.sum())
    denom = max(total, eps)
    out_data = (f2 @ w1) / denom
    parents = (features,) if w_t is None else (features, w_t)

    def bw(g):
        if features.requires_grad:
            features._accumulate(np.outer(g, w1 / denom).reshape(f.shape))
        if w_t is not None and w_t.requires_grad:
            gw = (g @ f2) / denom
            if total > eps:
                gw = gw - float(g @ out_data) / denom
            w_t._accumulate(gw.reshape(w.shape))

    return _make(out_data, parents, bw, "masked_average")


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors, summed left to right."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_mean needs at least one tensor")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = acc + t
    return acc if len(tensors) == 1 else acc * (1.0 / len(tensors))


def add_all(terms: Iterable[Tensor], dtype=np.float64) -> Tensor:
    """Left-to-right sum; an empty sum is a constant zero."""
    acc = None
    for t in terms:
        acc = t if acc is None else acc + t
    return acc if acc is not None else Tensor(np.zeros((), dtype=dtype))


def downsample_mask(mask, target_h: int, target_w: int) -> np.ndarray:
    """Area-average a mask to (target_h, target_w); the result is a constant."""
    m = np.asarray(mask, dtype=np.float64)
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target dimensions must be positive")
    h, w = m.shape
    if target_h > h or target_w > w:
        raise ValueError(f"cannot downsample {h}x{w} to larger {target_h}x{target_w}")
    if h % target_h == 0 and w % target_w == 0:
        return m.reshape(target_h, h // target_h, target_w, w // target_w).mean(axis=(1, 3))
    return _overlap_matrix(target_h, h) @ m @ _overlap_matrix(target_w, w).T


def _overlap_matrix(n_out: int, n_in: int) -> np.ndarray:
    # row i holds the fractional overlap of input cells with output cell i, normalised
    edges = np.linspace(0.0, n_in, n_out + 1)
    a = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            a[i, j] = min(hi, j + 1) - max(lo, j)
    return a / a.sum(axis=1, keepdims=True)


# checking ---------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data`` (in place)."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return out.reshape(param.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b))
    return float(num / max(den, 1e-12))


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> list[float]:
    """Relative error between backprop and central differences, one entry per param."""
    for p in params:
        p.zero_grad()
    backward(fn())
    errs = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        errs.append(relative_error(analytic, numerical_grad(fn, p, step)))
    return errs
