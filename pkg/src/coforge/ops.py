"""Differentiable operations for NCHW convolutional networks.

Every op takes :class:`~coforge.tensor.Tensor` inputs and returns a Tensor.
Backward closures return one gradient per tensor input (``None`` when the
input does not require grad, so the work is skipped).

Summation order is fixed: convolution is im2col followed by a single matmul
over the (Cin, kh, kw) axis in row-major order; its input gradient
scatter-adds kernel offsets in row-major (i, j) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateVarianceError, LabelRangeError, ShapeError
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a, b) -> Tensor:
    """Elementwise sum of two equal-shape tensors, or a tensor and a scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        out = a.data + np.asarray(b, dtype=a.dtype)
        if out.shape != a.shape:
            raise ShapeError(f"add: scalar operand broadcast changed shape {a.shape} -> {out.shape}")
        return record("add_scalar", (a,), out, lambda g: (g,))
    if a.shape != b.shape:
        axis = next((i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q), None)
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ", axis=axis)
    return record("add", (a, b), a.data + b.data, lambda g: (g if _needs(a) else None, g if _needs(b) else None))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if _needs(a) else None, g * ad if _needs(b) else None)

    return record("mul", (a, b), ad * bd, backward)


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return record("sum", (a,), np.asarray(a.data.sum(), dtype=dtype), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    out = np.asarray(a.data.sum() / dtype.type(n), dtype=dtype)
    return record("mean", (a,), out, lambda g: (np.full(shape, g / dtype.type(n), dtype=dtype),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, x.dtype.type(0)), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    k = x.dtype.type(h * w)
    out = x.data.sum(axis=(2, 3)) / k

    def backward(g):
        return (np.broadcast_to((g / k)[:, :, None, None], (n, c, h, w)).copy(),)

    return record("avgpool", (x,), out, backward)


def channel_affine(x: Tensor, shift, scale_) -> Tensor:
    """Fixed per-channel ``(x - shift) * scale``; constants, only x is differentiable."""
    shift = np.asarray(shift, dtype=x.dtype).reshape(1, -1, 1, 1)
    scale_ = np.asarray(scale_, dtype=x.dtype).reshape(1, -1, 1, 1)
    if x.ndim != 4 or x.shape[1] != shift.shape[1]:
        raise ShapeError(f"channel_affine: input {x.shape} vs {shift.shape[1]} channels", axis=1)
    return record("channel_affine", (x,), (x.data - shift) * scale_, lambda g: (g * scale_,))


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with x (N, D), weight (K, D), bias (K,)."""
    if x.ndim != 2:
        raise ShapeError(f"linear expects (N, D) input, got {x.shape}", axis=None)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}", axis=1)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)", axis=0)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ wd if _needs(x) else None, g.T @ xd if _needs(weight) else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if _needs(bias) else None)
        return grads

    return record("linear", inputs, out, backward)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input of shape (N, Cin, H, W).
        weight: kernels of shape (Cout, Cin, kh, kw).
        bias: optional (Cout,) vector.
        stride: step between windows, >= 1.
        padding: zeros added on every spatial border.

    Returns:
        Tensor of shape (N, Cout, H', W') with H' = (H + 2p - kh) // stride + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d expects (Cout, Cin, kh, kw) weight, got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}", axis=1)
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded height {h + 2 * padding}", axis=2)
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded width {w + 2 * padding}", axis=3)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)", axis=0)

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, Ho, Wo, Cin, kh, kw) -> rows of im2col
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    need_w = _needs(weight)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if need_w:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and _needs(bias):
            gb = g2.sum(axis=0)
        if _needs(x):
            # col2im one kernel offset at a time, accumulating in NHWC so each add is contiguous
            wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kh, kw, Cin, Cout)
            dxp = np.zeros((n, xp.shape[2], xp.shape[3], cin), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (g2 @ wk[i, j].T).reshape(
                        n, ho, wo, cin
                    )
            dxp = dxp.transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batchnorm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningStats | None = None,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over (N, H, W) for each channel.

    In train mode the batch statistics are used (and differentiated through);
    when ``update_stats`` is set, ``state`` is updated as
    ``running = (1 - momentum) * running + momentum * batch``, with the
    unbiased batch variance. Eval mode normalizes with ``state``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)", axis=1)
    dt = x.dtype.type
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise DegenerateVarianceError(f"batchnorm2d in train mode needs N*H*W >= 2 (got {count})")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        if update_stats and state is not None:
            m = np.float32(momentum)
            state.mean[...] = (1 - m) * state.mean + m * mean.astype(np.float32)
            state.var[...] = (1 - m) * state.var + m * (var * dt(count / (count - 1))).astype(np.float32)
    elif mode == "eval":
        if state is None:
            raise ValueError("batchnorm2d eval mode needs running stats")
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
        centered = x.data - mean[None, :, None, None]
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = (1 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]
    train = mode == "train"

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if _needs(gamma) else None
        gb = g.sum(axis=(0, 2, 3)) if _needs(beta) else None
        gx = None
        if _needs(x):
            dxhat = g * gd[None, :, None, None]
            if train:
                m = dt(n * h * w)
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                gx = (inv_std / m)[None, :, None, None] * (
                    m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
                )
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return record("batchnorm2d", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)", axis=0)
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelRangeError(f"labels must be integers, got dtype {labels.dtype}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label], stabilized by max-subtraction."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = check_labels(labels, n, k)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    dt = logits.dtype.type
    loss = np.asarray(-logp[rows, labels].sum() / dt(n), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / dt(n)),)

    return record("cross_entropy", (logits,), loss, backward)


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Non-differentiable per-row loss, used to pick the worst PGD restart."""
    labels = check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]
