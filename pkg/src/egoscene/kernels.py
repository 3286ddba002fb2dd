"""Differentiable numpy kernels, layer wrappers, Adam and gradient checking.

Activations are laid out ``(batch, time, channels)`` for the convolutional
stack and ``(batch, features)`` after pooling. Every layer caches what its
backward pass needs during ``forward`` and accumulates nothing between
calls: ``backward`` overwrites ``grads``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator for ``seed`` and a purpose/fold tag path.

    String tags are hashed with CRC32 so derivation is stable across runs and
    platforms (unlike ``hash()``).
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        words.append(zlib.crc32(tag.encode()) if isinstance(tag, str) else int(tag))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


# ---------------------------------------------------------------- convolution


def _as_batched(x):
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (L, C) or (B, L, C) input, got shape {x.shape}")
    return x, False


def conv1d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, dilation: int = 1):
    """Valid dilated convolution.

    ``weight`` is ``(C_out, C_in, k)``; ``out[t, o] = bias[o] +
    sum_{j, c} weight[o, c, j] * x[t + j*dilation, c]``.
    Returns ``(out, cache)``.
    """
    xb, squeeze = _as_batched(x)
    c_out, c_in, k = weight.shape
    if xb.shape[2] != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {xb.shape[2]}")
    L_in = xb.shape[1]
    L_out = L_in - (k - 1) * dilation
    if L_out < 1:
        raise ShapeError(f"input length {L_in} too short for kernel {k} with dilation {dilation}")
    if k == 1:
        cols = xb
    else:
        cols = np.concatenate([xb[:, j * dilation : j * dilation + L_out, :] for j in range(k)], axis=2)
    w_col = weight.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = cols @ w_col + bias
    cache = (cols, xb.shape, dilation, squeeze)
    return (out[0] if squeeze else out), cache


def conv1d_backward(grad_out: np.ndarray, cache, weight: np.ndarray):
    cols, x_shape, dilation, squeeze = cache
    c_out, c_in, k = weight.shape
    g = grad_out[None] if squeeze else grad_out
    B, L_in, _ = x_shape
    L_out = L_in - (k - 1) * dilation
    if g.shape != (B, L_out, c_out):
        raise ShapeError(f"grad_out shape {g.shape} does not match forward output {(B, L_out, c_out)}")
    g2 = g.reshape(-1, c_out)
    grad_w_col = cols.reshape(-1, k * c_in).T @ g2
    grad_w = grad_w_col.reshape(k, c_in, c_out).transpose(2, 1, 0)
    grad_b = g2.sum(axis=0)
    w_col = weight.transpose(2, 1, 0).reshape(k * c_in, c_out)
    gcols = g @ w_col.T
    if k == 1:
        grad_x = gcols
    else:
        grad_x = np.zeros(x_shape, dtype=g.dtype)
        for j in range(k):
            grad_x[:, j * dilation : j * dilation + L_out, :] += gcols[:, :, j * c_in : (j + 1) * c_in]
    return (grad_x[0] if squeeze else grad_x), np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------- dense


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """``y = x W^T + b`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    return x @ weight.T + bias, x


def linear_backward(grad_out: np.ndarray, cache, weight: np.ndarray):
    x = cache
    if grad_out.shape[-1] != weight.shape[0] or grad_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with input {x.shape}")
    g2 = grad_out.reshape(-1, weight.shape[0])
    x2 = x.reshape(-1, weight.shape[1])
    return grad_out @ weight, g2.T @ x2, g2.sum(axis=0)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormStats:
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray | None,
    beta: np.ndarray | None,
    stats: BatchNormStats,
    mode: str = "train",
    eps: float = BN_EPS,
):
    """Per-channel normalization over every axis but the last.

    Train mode normalizes with biased batch statistics and folds them into the
    running averages (``running = m*running + (1-m)*batch``; the first train
    step adopts the batch statistics). Eval mode uses the running averages.
    ``gamma``/``beta`` may be ``None`` for a non-affine layer.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if stats.initialized:
            m = stats.momentum
            stats.running_mean = m * stats.running_mean + (1 - m) * mean
            stats.running_var = m * stats.running_var + (1 - m) * var
        else:
            stats.running_mean = mean.copy()
            stats.running_var = var.copy()
    elif mode == "eval":
        if not stats.initialized:
            raise RuntimeError("batch norm evaluated before running statistics were set")
        mean = stats.running_mean.astype(x.dtype, copy=False)
        var = stats.running_var.astype(x.dtype, copy=False)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = xhat if gamma is None else xhat * gamma + beta
    return out, (xhat, inv_std, mode, axes)


def batchnorm_backward(grad_out: np.ndarray, cache, gamma: np.ndarray | None):
    xhat, inv_std, mode, axes = cache
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    g = grad_out if gamma is None else grad_out * gamma
    if mode == "eval":
        return g * inv_std, grad_gamma, grad_beta
    n = xhat.size // xhat.shape[-1]
    gsum = g.sum(axis=axes)
    gxsum = (g * xhat).sum(axis=axes)
    grad_x = (inv_std / n) * (n * g - gsum - xhat * gxsum)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------- pointwise


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def dropout_forward(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None):
    """Inverted dropout; identity in eval mode or at ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x, None
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = rng.random(x.shape, dtype=draw_dtype) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def temporal_mean_forward(x: np.ndarray):
    """Mean over the time axis (second to last)."""
    if x.shape[-2] < 1:
        raise ShapeError("temporal mean over an empty time axis")
    return x.mean(axis=-2), x.shape


def temporal_mean_backward(grad_out: np.ndarray, x_shape):
    L = x_shape[-2]
    return np.broadcast_to(np.expand_dims(grad_out / L, -2), x_shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Accepts a single ``(C,)`` logit vector with a scalar label, or ``(B, C)``
    with ``(B,)`` labels.
    """
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = lg.shape[-1]
    if lab.shape != (lg.shape[0],):
        raise ShapeError(f"{lab.shape[0]} labels for {lg.shape[0]} logit rows")
    if np.any(lab < 0) or np.any(lab >= C):
        raise ValueError(f"label out of range [0, {C})")
    z = lg - lg.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(lg.shape[0])
    loss = float(np.mean(logsum - z[rows, lab]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, lab] -= 1.0
    grad /= lg.shape[0]
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------- layers


class Layer:
    """Base for stateful layers holding named parameters and their grads."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, mode="eval", rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        pass


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d(Layer):
    def __init__(self, c_in, c_out, kernel, dilation=1, rng=None, dtype=np.float32, name="conv"):
        super().__init__()
        self.name, self.kernel, self.dilation = name, kernel, dilation
        rng = rng if rng is not None else make_rng(0)
        self.params["weight"] = kaiming_uniform(rng, (c_out, c_in, kernel), c_in * kernel, dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)

    @property
    def context(self) -> int:
        return (self.kernel - 1) * self.dilation

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = conv1d_forward(x, self.params["weight"], self.params["bias"], self.dilation)
        return out

    def backward(self, grad_out):
        gx, gw, gb = conv1d_backward(grad_out, self._cache, self.params["weight"])
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx


class Linear(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, name="linear"):
        super().__init__()
        self.name = name
        rng = rng if rng is not None else make_rng(0)
        self.params["weight"] = kaiming_uniform(rng, (n_out, n_in), n_in, dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = linear_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad_out):
        gx, gw, gb = linear_backward(grad_out, self._cache, self.params["weight"])
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx


class BatchNorm(Layer):
    def __init__(self, channels, affine=True, dtype=np.float32, name="bn"):
        super().__init__()
        self.name, self.affine, self.channels = name, affine, channels
        self.stats = BatchNormStats()
        if affine:
            self.params["gamma"] = np.ones(channels, dtype=dtype)
            self.params["beta"] = np.zeros(channels, dtype=dtype)

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = batchnorm_forward(
            x, self.params.get("gamma"), self.params.get("beta"), self.stats, mode
        )
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_backward(grad_out, self._cache, self.params.get("gamma"))
        if self.affine:
            self.grads["gamma"], self.grads["beta"] = gg, gb
        return gx

    def buffers(self):
        if not self.stats.initialized:
            return {}
        return {"running_mean": self.stats.running_mean, "running_var": self.stats.running_var}

    def load_buffers(self, buffers):
        if buffers:
            self.stats.running_mean = np.array(buffers["running_mean"])
            self.stats.running_var = np.array(buffers["running_var"])


class ReLU(Layer):
    name = "relu"

    def forward(self, x, mode="eval", rng=None):
        out, self._mask = relu_forward(x)
        return out

    def backward(self, grad_out):
        return relu_backward(grad_out, self._mask)


class Dropout(Layer):
    def __init__(self, rate=0.3, name="dropout"):
        super().__init__()
        self.rate, self.name = rate, name

    def forward(self, x, mode="eval", rng=None):
        out, self._mask = dropout_forward(x, self.rate, mode, rng)
        return out

    def backward(self, grad_out):
        return dropout_backward(grad_out, self._mask)


class TemporalMean(Layer):
    name = "pool"

    def forward(self, x, mode="eval", rng=None):
        out, self._shape = temporal_mean_forward(x)
        return out

    def backward(self, grad_out):
        return temporal_mean_backward(grad_out, self._shape)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    def forward(self, x, mode="eval", rng=None):
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {key} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------- gradient checking


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def numeric_grad(loss_fn: Callable[[], float], array: np.ndarray, index, eps=1e-5) -> float:
    old = array[index]
    array[index] = old + eps
    up = loss_fn()
    array[index] = old - eps
    down = loss_fn()
    array[index] = old
    return (up - down) / (2 * eps)


def grad_check(
    loss_fn: Callable[[], float],
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and central-difference grads.

    ``loss_fn`` must read the (mutable) ``arrays`` it differentiates. With
    ``max_coords`` only that many random coordinates per array are probed.
    """
    rng = rng if rng is not None else make_rng(0, "grad_check")
    worst = 0.0
    for key, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 arrays; {key} is {arr.dtype}")
        n = arr.size
        flat_idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), arr.shape)
            num = numeric_grad(loss_fn, arr, idx, eps)
            worst = max(worst, float(relative_error(analytic[key][idx], num)))
    return worst


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator, mode="eval",
                max_coords: int | None = None, corrupt: float = 1.0) -> float:
    """Grad-check a layer (params and input) under a random linear readout.

    ``corrupt`` scales the analytic gradients, used to confirm the harness
    flags a planted fault.
    """
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, mode)
    readout = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x, mode) * readout))

    loss()
    grad_x = layer.backward(readout)
    analytic = {f"p:{k}": corrupt * g for k, g in layer.grads.items()}
    analytic["input"] = corrupt * grad_x
    arrays = {f"p:{k}": layer.params[k] for k in layer.grads}
    arrays["input"] = x
    return grad_check(loss, arrays, analytic, max_coords=max_coords, rng=rng)
