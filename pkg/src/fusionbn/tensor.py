"""Dense float tensors with reverse-mode automatic differentiation.

Values are plain numpy arrays (NCHW layout for image batches, float32 in
training). Operations build an implicit graph of `Var` nodes as they
execute; `backward` walks that graph once in reverse topological order and
accumulates gradients additively into every node that requires them.

Reductions and moment estimates accumulate in float64 before casting back,
since per-channel variances of large activation maps are cancellation-prone
in float32.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateBatchError,
    ShapeError,
)

Array = np.ndarray


class Var:
    """One node of the differentiable graph: a value plus backward plumbing.

    Leaf nodes created with `parameter` collect gradients; interior nodes
    are produced by the op functions below and carry a closure that routes
    the incoming gradient to their parents.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        value: Array,
        requires_grad: bool = False,
        parents: tuple = (),
        backward: Optional[Callable[[Array], None]] = None,
    ):
        self.value = np.asarray(value)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def parameter(value: Array) -> Var:
    return Var(np.asarray(value), requires_grad=True)


def constant(value) -> Var:
    return Var(np.asarray(value))


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _add_grad(node: Var, g: Array) -> None:
    if not node.needs_grad():
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g.astype(node.value.dtype, copy=False).reshape(node.value.shape)


def backward(loss: Var) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each reachable node exactly once; gradients of shared nodes
    accumulate additively. Raises ContractError if the loss is not scalar.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss: Var, params: Iterable[Var]) -> list[Array]:
    """Convenience wrapper: run backward and collect per-parameter grads."""
    backward(loss)
    return [
        p.grad if p.grad is not None else np.zeros_like(p.value) for p in params
    ]


# ---------------------------------------------------------------------------
# elementwise / algebra ops


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Var(a.value + b.value, parents=(a, b))

    def back(g):
        _add_grad(a, g)
        _add_grad(b, g)

    out._backward = back
    return out


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = Var(a.value - b.value, parents=(a, b))

    def back(g):
        _add_grad(a, g)
        _add_grad(b, -g)

    out._backward = back
    return out


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Var(a.value * b.value, parents=(a, b))

    def back(g):
        _add_grad(a, g * b.value)
        _add_grad(b, g * a.value)

    out._backward = back
    return out


def mul_scalar(a, c: float) -> Var:
    a = _as_var(a)
    out = Var(a.value * a.value.dtype.type(c), parents=(a,))
    out._backward = lambda g: _add_grad(a, g * a.value.dtype.type(c))
    return out


def add_scalar(a, c: float) -> Var:
    a = _as_var(a)
    out = Var(a.value + a.value.dtype.type(c), parents=(a,))
    out._backward = lambda g: _add_grad(a, g)
    return out


def relu(x) -> Var:
    x = _as_var(x)
    out = Var(np.maximum(x.value, 0), parents=(x,))
    out._backward = lambda g: _add_grad(x, g * (x.value > 0))
    return out


def sigmoid(x) -> Var:
    x = _as_var(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = Var(s, parents=(x,))
    out._backward = lambda g: _add_grad(x, g * s * (1.0 - s))
    return out


def sum_all(x) -> Var:
    x = _as_var(x)
    total = x.value.sum(dtype=np.float64)
    out = Var(np.asarray(total, dtype=x.dtype), parents=(x,))
    out._backward = lambda g: _add_grad(x, np.broadcast_to(g, x.shape).copy())
    return out


def reshape(x, shape) -> Var:
    x = _as_var(x)
    out = Var(x.value.reshape(shape), parents=(x,))
    out._backward = lambda g: _add_grad(x, g.reshape(x.shape))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Var:
    """Standard matrix product of 2-D tensors, differentiable in both."""
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.shape} x {b.shape}"
        )
    out = Var(a.value @ b.value, parents=(a, b))

    def back(g):
        _add_grad(a, g @ b.value.T)
        _add_grad(b, a.value.T @ g)

    out._backward = back
    return out


def add_rowvec(a, b) -> Var:
    """a[N,K] + b[K] broadcast over rows (dense-layer bias)."""
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {a.shape} and {b.shape}")
    out = Var(a.value + b.value[None, :], parents=(a, b))

    def back(g):
        _add_grad(a, g)
        _add_grad(b, g.sum(axis=0))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# convolution / pooling / resize kernels (shared by graph ops and the
# evaluation-mode forward pass)


def _conv_windows(x: Array, kh: int, kw: int, stride: int, padding: int) -> Array:
    if padding:
        x = np.pad(
            x, ((0, 0), (0, 0), (padding, padding), (padding, padding))
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [N,C,OH,OW,KH,KW]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"conv output size not integral: input {size}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return span // stride + 1


def conv2d_array(
    x: Array, w: Array, stride: int = 1, padding: int = 0, bias: Array | None = None
) -> Array:
    """Cross-correlation of x[N,C,H,W] with w[F,C,KH,KW] (forward only)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: kernel channels {w.shape} do not match input {x.shape}"
        )
    conv_output_size(x.shape[2], w.shape[2], stride, padding)
    conv_output_size(x.shape[3], w.shape[3], stride, padding)
    win = _conv_windows(x, w.shape[2], w.shape[3], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N,OH,OW,F]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d(x, w, stride: int = 1, padding: int = 0, bias=None) -> Var:
    """Differentiable conv2d; gradient flows to input, kernel, and bias."""
    x, w = _as_var(x), _as_var(w)
    b = _as_var(bias) if bias is not None else None
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: kernel channels {w.shape} do not match input {x.shape}"
        )
    kh, kw = w.shape[2], w.shape[3]
    conv_output_size(x.shape[2], kh, stride, padding)
    conv_output_size(x.shape[3], kw, stride, padding)
    win = _conv_windows(x.value, kh, kw, stride, padding)
    val = np.tensordot(win, w.value, axes=([1, 4, 5], [1, 2, 3]))
    val = np.ascontiguousarray(val.transpose(0, 3, 1, 2))
    if b is not None:
        val = val + b.value[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Var(val, parents=parents)

    def back(g):
        # dW: correlate incoming grad with the cached input windows
        _add_grad(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None:
            _add_grad(b, g.sum(axis=(0, 2, 3)))
        if x.needs_grad():
            dwin = np.einsum("nfhw,fckl->nchwkl", g, w.value, optimize=True)
            n, c, h_in, w_in = x.shape
            oh, ow = g.shape[2], g.shape[3]
            dxp = np.zeros(
                (n, c, h_in + 2 * padding, w_in + 2 * padding), dtype=x.value.dtype
            )
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                    ] += dwin[:, :, :, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _add_grad(x, dxp)

    out._backward = back
    return out


def conv1x1(x, w, bias=None) -> Var:
    """Pointwise channel mixing x[N,C,H,W] -> [N,F,H,W] with w[F,C]."""
    x, w = _as_var(x), _as_var(w)
    b = _as_var(bias) if bias is not None else None
    if x.value.ndim != 4 or w.value.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1: shapes {x.shape} and {w.shape}")
    val = np.einsum("nchw,fc->nfhw", x.value, w.value, optimize=True)
    if b is not None:
        val += b.value[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Var(val, parents=parents)

    def back(g):
        _add_grad(w, np.einsum("nfhw,nchw->fc", g, x.value, optimize=True))
        if b is not None:
            _add_grad(b, g.sum(axis=(0, 2, 3)))
        _add_grad(x, np.einsum("nfhw,fc->nchw", g, w.value, optimize=True))

    out._backward = back
    return out


def maxpool2_array(x: Array) -> tuple[Array, Array]:
    """2x2/stride-2 max pooling; returns (pooled, argmax within block)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2 needs even spatial extents, got {x.shape}")
    blocks = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2(x) -> Var:
    x = _as_var(x)
    val, idx = maxpool2_array(x.value)
    out = Var(val, parents=(x,))

    def back(g):
        n, c, h2, w2 = val.shape
        dblocks = np.zeros((n, c, h2, w2, 4), dtype=x.value.dtype)
        np.put_along_axis(dblocks, idx[..., None], g[..., None], axis=-1)
        dx = (
            dblocks.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2 * 2, w2 * 2)
        )
        _add_grad(x, dx)

    out._backward = back
    return out


def mean_spatial(x) -> Var:
    """Global average pool: [N,C,H,W] -> [N,C]."""
    x = _as_var(x)
    n, c, h, w = x.shape
    val = x.value.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    out = Var(val, parents=(x,))

    def back(g):
        _add_grad(
            x,
            np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(
                x.value.dtype
            ),
        )

    out._backward = back
    return out


@lru_cache(maxsize=32)
def _linear_resize_weights(out_size: int, in_size: int) -> Array:
    """Row-interpolation matrix for bilinear resize (half-pixel centers)."""
    w = np.zeros((out_size, in_size), dtype=np.float64)
    if in_size == 1:
        w[:, 0] = 1.0
        return w
    scale = in_size / out_size
    pos = (np.arange(out_size) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, in_size - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    w[np.arange(out_size), lo] += 1.0 - frac
    w[np.arange(out_size), hi] += frac
    return w


def upsample_bilinear_array(x: Array, out_h: int, out_w: int) -> Array:
    wr = _linear_resize_weights(out_h, x.shape[2]).astype(x.dtype)
    wc = _linear_resize_weights(out_w, x.shape[3]).astype(x.dtype)
    t = np.tensordot(x, wr, axes=(2, 1))  # [N,C,W,OH]
    t = np.tensordot(t, wc, axes=(2, 1))  # [N,C,OH,OW]
    return np.ascontiguousarray(t)


def upsample_bilinear(x, out_h: int, out_w: int) -> Var:
    x = _as_var(x)
    wr = _linear_resize_weights(out_h, x.shape[2]).astype(x.dtype)
    wc = _linear_resize_weights(out_w, x.shape[3]).astype(x.dtype)
    out = Var(upsample_bilinear_array(x.value, out_h, out_w), parents=(x,))

    def back(g):
        t = np.tensordot(g, wr, axes=(2, 0))  # [N,C,OW,IH]
        t = np.tensordot(t, wc, axes=(2, 0))  # [N,C,IH,IW]
        _add_grad(x, np.ascontiguousarray(t))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# batch statistics


def channel_moments(x: Array) -> tuple[Array, Array]:
    """Per-channel mean and biased variance of x[N,C,H,W] over N,H,W.

    Accumulates in float64. Raises DegenerateBatchError when the batch
    contributes a single element per channel (variance undefined in any
    useful sense; running statistics would collapse).
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_moments expects [N,C,H,W], got {x.shape}")
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise DegenerateBatchError(
            f"batch of {n * h * w} element(s) per channel cannot provide statistics"
        )
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean[None, :, None, None].astype(x.dtype)
    var = np.square(centered, dtype=np.float64).mean(axis=(0, 2, 3), dtype=np.float64)
    return mean, var


def batchnorm_train(x, gamma, alpha, eps: float = 1e-5):
    """Normalize with THIS batch's per-channel moments, then scale/shift.

    Returns (out, batch_mean, batch_var); the float64 moments let the
    caller update running statistics. Gradient flows through the batch
    statistics as well as the affine parameters.
    """
    x, gamma, alpha = _as_var(x), _as_var(gamma), _as_var(alpha)
    mu64, var64 = channel_moments(x.value)
    n, c, h, w = x.shape
    count = n * h * w
    mu = mu64.astype(x.value.dtype)
    var = var64.astype(x.value.dtype)
    inv = 1.0 / np.sqrt(var + x.value.dtype.type(eps))
    xhat = (x.value - mu[None, :, None, None]) * inv[None, :, None, None]
    val = gamma.value[None, :, None, None] * xhat + alpha.value[None, :, None, None]
    out = Var(val, parents=(x, gamma, alpha))

    def back(g):
        _add_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _add_grad(alpha, g.sum(axis=(0, 2, 3)))
        if x.needs_grad():
            dxhat = g * gamma.value[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3))
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
            dx = (
                inv[None, :, None, None]
                / count
                * (count * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            )
            _add_grad(x, dx)

    out._backward = back
    return out, mu64, var64


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels: Array) -> Var:
    """Mean cross entropy of logits[N,K] against integer labels[N]."""
    logits = _as_var(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(
            f"label out of range: values in [{labels.min()}, {labels.max()}] for {k} classes"
        )
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean(dtype=np.float64)
    out = Var(np.asarray(loss, dtype=z.dtype), parents=(logits,))

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _add_grad(logits, p * (np.asarray(g).reshape(()) / n))

    out._backward = back
    return out


def soft_dice_loss(probs, target: Array, smooth: float = 0.0) -> Var:
    """1 - dice overlap between probabilities and a {0,1} mask.

    With smooth=0 this is the exact dice complement; both-empty inputs
    yield loss 0 by convention (perfect agreement on emptiness).
    """
    probs = _as_var(probs)
    target = np.asarray(target, dtype=probs.value.dtype)
    if probs.shape != target.shape:
        raise ShapeError(f"dice: shapes {probs.shape} and {target.shape} differ")
    p = probs.value
    if p.min() < -1e-6 or p.max() > 1.0 + 1e-6:
        raise ContractError("dice loss expects probabilities in [0, 1]")
    inter = float((p * target).sum(dtype=np.float64))
    denom = float(p.sum(dtype=np.float64) + target.sum(dtype=np.float64)) + smooth
    if denom == 0.0:
        return Var(np.asarray(0.0, dtype=p.dtype), parents=(probs,))
    dice = (2.0 * inter + smooth) / denom
    out = Var(np.asarray(1.0 - dice, dtype=p.dtype), parents=(probs,))

    def back(g):
        gd = np.asarray(g).reshape(())
        ddice_dp = (2.0 * target * denom - (2.0 * inter + smooth)) / denom**2
        _add_grad(probs, -gd * ddice_dp)

    out._backward = back
    return out
