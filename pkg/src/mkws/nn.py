"""Small numpy neural-network core: layers with explicit backward passes and Adam.

Activations are plain ``np.ndarray`` tensors (NHWC for images). Parameters are
stored in float32; reductions accumulate in float64. Every layer follows the
dtype of its parameters, which lets the gradient checker re-run a fragment in
float64 without a separate code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mkws.errors import ShapeError

Tensor = np.ndarray

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    name: str = ""
    trainable: bool = True
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: gradient shape {self.grad.shape} != {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def _value(p) -> np.ndarray:
    return p.value if isinstance(p, Parameter) else np.asarray(p)


# -- convolution ------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out, pad_before, pad_after) along one spatial axis (TF rules)."""
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input extent {size} smaller than kernel {k}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(x: Tensor, kh: int, kw: int, stride: int, padding: str):
    n, h, w, c = x.shape
    ho, pt, pb = conv_output_size(h, kh, stride, padding)
    wo, pl, pr = conv_output_size(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) -> (N*Ho*Wo, kh*kw*C) matching the KhKwCinCout kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    return cols, (ho, wo), (pt, pb, pl, pr)


def _check_conv(x: Tensor, w: np.ndarray, stride: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and KhKwCinCout kernel, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"channel mismatch: input has {x.shape[3]}, kernel expects {w.shape[2]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")


def conv2d(x: Tensor, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an NHWC batch with a (kh, kw, cin, cout) kernel."""
    w = _value(kernel)
    _check_conv(x, w, stride)
    kh, kw, cin, cout = w.shape
    cols, (ho, wo), _ = _im2col(x, kh, kw, stride, padding)
    return (cols @ w.reshape(-1, cout)).reshape(x.shape[0], ho, wo, cout)


def _col2im(dcols, x_shape, kh, kw, stride, pads, out_hw):
    n, h, w, c = x_shape
    pt, pb, pl, pr = pads
    ho, wo = out_hw
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=dcols.dtype)
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pt : pt + h, pl : pl + w, :]


def conv2d_backward(dy: Tensor, x: Tensor, kernel, stride: int = 1, padding: str = "same", cols=None):
    """Gradients of ``conv2d`` w.r.t. its input and kernel."""
    w = _value(kernel)
    kh, kw, cin, cout = w.shape
    if cols is None:
        cols, out_hw, pads = _im2col(x, kh, kw, stride, padding)
    else:
        ho, pt, pb = conv_output_size(x.shape[1], kh, stride, padding)
        wo, pl, pr = conv_output_size(x.shape[2], kw, stride, padding)
        out_hw, pads = (ho, wo), (pt, pb, pl, pr)
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    dcols = dy2 @ w.reshape(-1, cout).T
    dx = _col2im(dcols, x.shape, kh, kw, stride, pads, out_hw)
    return dx, dw


# -- dense / activations / pooling ------------------------------------------


def dense(x: Tensor, weight, bias) -> Tensor:
    w, b = _value(weight), _value(bias)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shape mismatch: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w + b


def dense_backward(dy: Tensor, x: Tensor, weight):
    w = _value(weight)
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return dx, dw, db


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "selu":
        neg = SELU_ALPHA * np.expm1(np.minimum(x, 0))
        return (SELU_LAMBDA * np.where(x > 0, x, neg)).astype(x.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dy: Tensor, x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return dy * (x > 0)
    if kind == "selu":
        slope = np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0)))
        return (dy * slope).astype(dy.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool expects NHWC with H,W >= 1, got {x.shape}")
    return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(dy: Tensor, x_shape) -> Tensor:
    n, h, w, c = x_shape
    return np.broadcast_to((dy / (h * w))[:, None, None, :], x_shape).copy()


def softmax(logits: Tensor) -> Tensor:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    log_probs = z - logsum[:, None]
    loss = float(-log_probs[np.arange(len(labels)), labels].mean())
    return loss, np.exp(log_probs)


def softmax_xent_backward(probs: Tensor, labels, dtype=np.float32) -> Tensor:
    labels = np.asarray(labels)
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return (d / len(labels)).astype(dtype)


# -- layers -----------------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def lecun_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(size=shape) * math.sqrt(1.0 / fan_in)).astype(np.float32)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def backward(self, dy: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, cin, cout, kernel=3, stride=1, padding="same", rng=None, name="conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        fan_in = kernel * kernel * cin
        self.weight = Parameter(he_uniform(rng, (kernel, kernel, cin, cout), fan_in), f"{name}/kernel")
        self.bias = Parameter(np.zeros(cout, np.float32), f"{name}/bias")
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        w = self.weight.value
        _check_conv(x, w, self.stride)
        kh, kw, _, cout = w.shape
        cols, (ho, wo), _ = _im2col(x.astype(w.dtype, copy=False), kh, kw, self.stride, self.padding)
        y = (cols @ w.reshape(-1, cout) + self.bias.value).reshape(x.shape[0], ho, wo, cout)
        self._cache = (x.shape, cols) if training else None
        return y

    def backward(self, dy):
        x_shape, cols = self._cache
        w = self.weight.value
        kh, kw, _, cout = w.shape
        dy2 = dy.reshape(-1, cout)
        self.weight.grad += (cols.T @ dy2).reshape(w.shape)
        self.bias.grad += dy2.sum(axis=0, dtype=np.float64).astype(w.dtype)
        ho, pt, pb = conv_output_size(x_shape[1], kh, self.stride, self.padding)
        wo, pl, pr = conv_output_size(x_shape[2], kw, self.stride, self.padding)
        dcols = dy2 @ w.reshape(-1, cout).T
        return _col2im(dcols, x_shape, kh, kw, self.stride, (pt, pb, pl, pr), (ho, wo))


class Dense(Layer):
    def __init__(self, nin, nout, init="glorot", rng=None, name="dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "he":
            w = he_uniform(rng, (nin, nout), nin)
        elif init == "lecun":
            w = lecun_normal(rng, (nin, nout), nin)
        elif init == "glorot":
            w = glorot_uniform(rng, (nin, nout), nin, nout)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w, f"{name}/kernel")
        self.bias = Parameter(np.zeros(nout, np.float32), f"{name}/bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        x = x.astype(self.weight.value.dtype, copy=False)
        self._x = x if training else None
        return dense(x, self.weight, self.bias)

    def backward(self, dy):
        dx, dw, db = dense_backward(dy, self._x, self.weight)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Activation(Layer):
    def __init__(self, kind: str):
        activation(np.zeros(1, np.float32), kind)  # validates kind
        self.kind = kind
        self._x = None

    def forward(self, x, training=False):
        self._x = x if training else None
        return activation(x, self.kind)

    def backward(self, dy):
        return activation_backward(dy, self._x, self.kind)


class GlobalAvgPool(Layer):
    def forward(self, x, training=False):
        self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._shape)


class Flatten(Layer):
    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Standardize(Layer):
    """Fixed affine input normalization ``(x - shift) / scale`` plus a channel axis.

    Maps (N, T, F) spectrogram batches to (N, T, F, 1). Its parameters are
    frozen statistics, never trained.
    """

    def __init__(self, shift: float = 0.0, scale: float = 1.0, name="standardize"):
        self.shift = Parameter(np.array([shift], np.float32), f"{name}/shift", trainable=False)
        self.scale = Parameter(np.array([scale], np.float32), f"{name}/scale", trainable=False)

    def params(self):
        return [self.shift, self.scale]

    def forward(self, x, training=False):
        dt = self.scale.value.dtype
        y = (x.astype(dt, copy=False) - self.shift.value[0]) / self.scale.value[0]
        return y[..., None] if y.ndim == 3 else y

    def backward(self, dy):
        g = dy / self.scale.value[0]
        return g[..., 0] if g.ndim == 4 and g.shape[-1] == 1 else g


class Sequential(Layer):
    """Feed-forward layer stack; the list order is the backward tape."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, training=False, upto: int | None = None):
        for layer in self.layers[:upto]:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """One bias-corrected Adam update in place; frozen parameters are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        if not p.trainable:
            continue
        key = p.name or i
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(p.value)
            state.second_moment[key] = np.zeros_like(p.value)
        v = state.second_moment[key]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.value -= update.astype(p.value.dtype, copy=False)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    coords_checked: int
    per_target: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(
    fragment: Layer,
    x: Tensor,
    tolerance: float = 1e-3,
    num_coords: int = 50,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare float32 analytic gradients against float64 central differences.

    The scalar objective is ``sum(r * fragment(x))`` with a fixed random
    projection ``r``. Up to ``num_coords`` coordinates are sampled from the
    input and from every trainable parameter. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-3 * max|n|)`` where the floor is
    taken over that target's sampled numeric gradients.
    """
    rng = np.random.default_rng(seed)
    x32 = np.asarray(x, dtype=np.float32)
    params = [p for p in fragment.params()]

    for p in params:
        p.zero_grad()
    y = fragment.forward(x32, training=True)
    r = rng.standard_normal(y.shape)
    dx = fragment.backward(r.astype(np.float32))
    analytic = {"input": np.asarray(dx, np.float64)}
    for p in params:
        if p.trainable:
            analytic[p.name] = p.grad.astype(np.float64)

    originals = {id(p): p.value for p in params}
    for p in params:
        p.value = p.value.astype(np.float64)
    x64 = x32.astype(np.float64)

    def objective(xx):
        return float(np.sum(r * fragment.forward(xx, training=False)))

    per_target = {}
    total = 0
    try:
        targets = [("input", x64, None)] + [(p.name, p.value, p) for p in params if p.trainable]
        for name, arr, _ in targets:
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(num_coords, flat.size), replace=False)
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                plus = objective(x64)
                flat[i] = orig - step
                minus = objective(x64)
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * step)
            a = analytic[name].reshape(-1)[idx]
            floor = max(1e-3 * float(np.max(np.abs(numeric))), 1e-12)
            rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            per_target[name] = float(rel.max())
            total += idx.size
    finally:
        for p in params:
            p.value = originals[id(p)]
            p.zero_grad()

    return GradCheckReport(max(per_target.values()), total, per_target, tolerance)


def count_parameters(params: Sequence[Parameter], trainable_only: bool = False) -> int:
    return sum(p.size for p in params if p.trainable or not trainable_only)
