"""Differentiable primitive operations on tensors."""

from __future__ import annotations

import builtins
from collections.abc import Sequence
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor, as_tensor, make_result
from neurodecode.utils.errors import ConfigError, DimensionError, NumericError

Axis = int | tuple[int, ...] | None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(value: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    first, second = value
    return int(first), int(second)


# -- elementwise arithmetic ----------------------------------------------
def add(a: Any, b: Any) -> Tensor:
    """Elementwise sum with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a: Any, b: Any) -> Tensor:
    """Elementwise difference with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Any, b: Any) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a: Any, b: Any) -> Tensor:
    """Elementwise quotient; any zero denominator is a numeric error."""
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_result(a.data / b.data, (a, b), backward, "div")


def neg(a: Any) -> Tensor:
    """Elementwise negation."""
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Any, exponent: float) -> Tensor:
    """Raise to a constant scalar power."""
    a = as_tensor(a)
    out = np.power(a.data, exponent)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * exponent * np.power(a.data, exponent - 1),)

    return make_result(out, (a,), backward, "power")


def exp(a: Any) -> Tensor:
    """Elementwise exponential."""
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Any) -> Tensor:
    """Elementwise natural logarithm of a strictly positive tensor."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Any) -> Tensor:
    """Elementwise square root."""
    return power(a, 0.5)


def maximum(a: Any, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient flows where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return make_result(np.maximum(a.data, floor), (a,), lambda g: (g * mask,), "maximum")


def clip(a: Any, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; gradient flows strictly inside the interval."""
    a = as_tensor(a)
    mask = (a.data > low) & (a.data < high)
    return make_result(np.clip(a.data, low, high), (a,), lambda g: (g * mask,), "clip")


# -- activations ---------------------------------------------------------
def relu(a: Any) -> Tensor:
    """Rectified linear unit."""
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Any) -> Tensor:
    """Logistic sigmoid."""
    a = as_tensor(a)
    out = expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Any) -> Tensor:
    """Hyperbolic tangent."""
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(a: Any, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a: Any, axis: int = -1) -> Tensor:
    """Numerically stable log of the softmax along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


# -- linear algebra ------------------------------------------------------
def matmul(a: Any, b: Any) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# -- reductions and shape ops -------------------------------------------
def sum(a: Any, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis``."""
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_result(out, (a,), backward, "sum")


def mean(a: Any, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Average over ``axis``."""
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError(f"mean over empty axis {axis} of shape {a.shape}")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    """Reshape without copying the logical order."""
    a = as_tensor(a)
    out = a.data.reshape(tuple(shape))
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes."""
    a = as_tensor(a)
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(perm))
    out = a.data.transpose(perm)
    return make_result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Any, first: int, second: int) -> Tensor:
    """Exchange two axes."""
    a = as_tensor(a)
    perm = list(range(a.ndim))
    perm[first], perm[second] = perm[second], perm[first]
    return transpose(a, perm)


def getitem(a: Any, index: Any) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    out = np.array(a.data[index], copy=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return make_result(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise DimensionError("concat of an empty sequence")
    sizes = [part.shape[axis] for part in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return make_result(
        np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat"
    )


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    """Stack along a new axis."""
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise DimensionError("stack of an empty sequence")

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return make_result(np.stack([p.data for p in parts], axis=axis), parts, backward, "stack")


# -- normalization and regularization -----------------------------------
def layer_norm(
    x: Any, gamma: Any | None = None, beta: Any | None = None, eps: float = 1e-5
) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the affine."""
    x = as_tensor(x)
    centered = sub(x, mean(x, axis=-1, keepdims=True))
    variance = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(variance, eps)))
    if gamma is not None:
        normed = mul(normed, gamma)
    if beta is not None:
        normed = add(normed, beta)
    return normed


def l2_normalize(x: Any, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = sqrt(add(sum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def dropout(x: Any, p: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout; the identity map outside training."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.uniform(size=x.shape) >= p
    mask = keep.astype(x.data.dtype) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- convolution and pooling --------------------------------------------
def _strided_windows(
    padded: np.ndarray, kh: int, kw: int, sh: int, sw: int, out_h: int, out_w: int
) -> np.ndarray:
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return windows[:, :, : (out_h - 1) * sh + 1 : sh, : (out_w - 1) * sw + 1 : sw]


def _scatter_windows(
    target: np.ndarray, cols: np.ndarray, kh: int, kw: int, sh: int, sw: int
) -> None:
    """Add ``cols[N, H, W, C, kh, kw]`` back onto the padded ``target`` grid."""
    out_h, out_w = cols.shape[1], cols.shape[2]
    for u in range(kh):
        for v in range(kw):
            target[
                :, :, u : u + sh * (out_h - 1) + 1 : sh, v : v + sw * (out_w - 1) + 1 : sw
            ] += cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)


def conv2d(
    x: Any,
    weight: Any,
    bias: Any | None = None,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
) -> Tensor:
    """2-D cross-correlation of ``x[N, C, H, W]`` with ``weight[O, C, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, _, height, width = x.shape
    _, _, kh, kw = weight.shape
    out_h = (height + 2 * ph - kh) // sh + 1
    out_w = (width + 2 * pw - kw) // sw + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d kernel {weight.shape[2:]} larger than input {x.shape[2:]}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = _strided_windows(padded, kh, kw, sh, sw, out_h, out_w)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, weight.data, axes=([1], [0]))
        grad_padded = np.zeros_like(padded)
        _scatter_windows(grad_padded, cols, kh, kw, sh, sw)
        grads = [grad_padded[:, :, ph : ph + height, pw : pw + width], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(
    x: Any,
    weight: Any,
    bias: Any | None = None,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
) -> Tensor:
    """Transposed 2-D convolution of ``x[N, Cin, H, W]`` with ``weight[Cin, Cout, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"conv_transpose2d shape mismatch: input {x.shape} vs weight {weight.shape}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, _, height, width = x.shape
    _, cout, kh, kw = weight.shape
    full_h = (height - 1) * sh + kh
    full_w = (width - 1) * sw + kw
    out_h, out_w = full_h - 2 * ph, full_w - 2 * pw
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv_transpose2d padding {padding} too large for {x.shape}")
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))
    full = np.zeros((n, cout, full_h, full_w), dtype=x.data.dtype)
    _scatter_windows(full, cols, kh, kw, sh, sw)
    out = full[:, :, ph : ph + out_h, pw : pw + out_w]
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        grad_full = np.zeros((n, cout, full_h, full_w), dtype=g.dtype)
        grad_full[:, :, ph : ph + out_h, pw : pw + out_w] = g
        windows = _strided_windows(grad_full, kh, kw, sh, sw, height, width)
        grad_x = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
        grad_w = np.tensordot(x.data, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [grad_x.transpose(0, 3, 1, 2), grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


def conv1d(
    x: Any, weight: Any, bias: Any | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """1-D cross-correlation of ``x[N, C, L]`` with ``weight[O, C, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and weight, got {x.shape}, {weight.shape}")
    n, c, length = x.shape
    o, _, k = weight.shape
    out = conv2d(
        reshape(x, (n, c, 1, length)),
        reshape(weight, (o, weight.shape[1], 1, k)),
        bias,
        stride=(1, stride),
        padding=(0, padding),
    )
    return reshape(out, (n, o, out.shape[-1]))


def conv_transpose1d(
    x: Any, weight: Any, bias: Any | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed 1-D convolution of ``x[N, Cin, L]`` with ``weight[Cin, Cout, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(
            f"conv_transpose1d expects 3-D input and weight, got {x.shape}, {weight.shape}"
        )
    n, c, length = x.shape
    cin, cout, k = weight.shape
    out = conv_transpose2d(
        reshape(x, (n, c, 1, length)),
        reshape(weight, (cin, cout, 1, k)),
        bias,
        stride=(1, stride),
        padding=(0, padding),
    )
    return reshape(out, (n, cout, out.shape[-1]))


def max_pool1d(x: Any, kernel: int) -> Tensor:
    """Non-overlapping max pooling over the last axis of ``x[N, C, L]``."""
    x = as_tensor(x)
    n, c, length = x.shape
    pooled = length // kernel
    if pooled < 1:
        raise DimensionError(f"max_pool1d kernel {kernel} larger than length {length}")
    blocks = x.data[..., : pooled * kernel].reshape(n, c, pooled, kernel)
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, index, g[..., None], axis=-1)
        grad = np.zeros_like(x.data)
        grad[..., : pooled * kernel] = grad_blocks.reshape(n, c, pooled * kernel)
        return (grad,)

    return make_result(out, (x,), backward, "max_pool1d")


def avg_pool2d(x: Any, factor: int) -> Tensor:
    """Average non-overlapping ``factor``×``factor`` blocks of ``x[N, C, H, W]``."""
    x = as_tensor(x)
    n, c, height, width = x.shape
    if factor == 1:
        return x
    if height % factor or width % factor:
        raise DimensionError(f"avg_pool2d factor {factor} does not divide {x.shape[2:]}")
    blocks = reshape(x, (n, c, height // factor, factor, width // factor, factor))
    return mean(blocks, axis=(3, 5))


def upsample_nearest2d(x: Any, factor: int) -> Tensor:
    """Repeat every pixel ``factor`` times along both spatial axes."""
    x = as_tensor(x)
    if factor == 1:
        return x
    n, c, height, width = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(n, c, height, factor, width, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest2d")


# -- losses --------------------------------------------------------------
def mse_loss(pred: Any, target: Any) -> Tensor:
    """Mean squared error over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def cross_entropy(logits: Any, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shape mismatch: {logits.shape} vs {labels.shape}")
    picked = getitem(log_softmax(logits, axis=-1), (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


def total(values: Sequence[Tensor]) -> Tensor:
    """Sum a list of scalar tensors."""
    return builtins.sum(values[1:], start=values[0])
