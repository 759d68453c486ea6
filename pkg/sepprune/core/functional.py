"""
Differentiable ops on TensorNodes.

Every op computes its values with numpy, refuses to produce non-finite values, and, when a tape is active and any
input requires a gradient, records itself together with a backward closure.

Broadcasting is deliberately narrow: identical shapes, a per-channel [C] vector against a [B, C, L] array, or a
keepdims-reduced operand (same rank, every dimension equal or 1).
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sepprune.core.autodiff import ArrayLike, BackwardFn, TensorNode, active_tape, as_node
from sepprune.core.errors import InvalidArgumentError, NumericFailureError


NORM_EPSILON = 1e-5


def _result(op: str, inputs: Sequence[TensorNode], values: np.ndarray, backward: BackwardFn) -> TensorNode:
    if not np.all(np.isfinite(values)):
        raise NumericFailureError(op, "non-finite value in forward pass")
    tape = active_tape()
    if tape is not None and any(node.requires_grad for node in inputs):
        return tape.record(op, inputs, values, backward)
    return TensorNode(values)


#
# Broadcasting helpers
#


def _is_per_channel(vector: Tuple[int, ...], full: Tuple[int, ...]) -> bool:
    return len(vector) == 1 and len(full) == 3 and vector[0] == full[1]


def _check_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if _is_per_channel(a, b):
        return b
    if _is_per_channel(b, a):
        return a
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    raise InvalidArgumentError("{}: cannot broadcast shapes {} and {}".format(op, a, b))


def _expand(values: np.ndarray, target: Tuple[int, ...]) -> np.ndarray:
    if values.ndim == 1 and len(target) == 3 and values.shape != target:
        return values[None, :, None]
    return values


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 1 and grad.ndim == 3:
        return grad.sum(axis=(0, 2))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


#
# Elementwise ops
#


def add(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a.shape, b.shape)
    values = _expand(a.values, b.shape) + _expand(b.values, a.shape)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [_reduce_to(g, a.shape) if needs[0] else None, _reduce_to(g, b.shape) if needs[1] else None]

    return _result("add", [a, b], values, backward)


def sub(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a.shape, b.shape)
    values = _expand(a.values, b.shape) - _expand(b.values, a.shape)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [_reduce_to(g, a.shape) if needs[0] else None, _reduce_to(-g, b.shape) if needs[1] else None]

    return _result("sub", [a, b], values, backward)


def mul(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a.shape, b.shape)
    a_values, b_values = _expand(a.values, b.shape), _expand(b.values, a.shape)
    values = a_values * b_values

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [
            _reduce_to(g * b_values, a.shape) if needs[0] else None,
            _reduce_to(g * a_values, b.shape) if needs[1] else None,
        ]

    return _result("mul", [a, b], values, backward)


def div(a: ArrayLike, b: ArrayLike) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _check_broadcast("div", a.shape, b.shape)
    a_values, b_values = _expand(a.values, b.shape), _expand(b.values, a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = a_values / b_values

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [
            _reduce_to(g / b_values, a.shape) if needs[0] else None,
            _reduce_to(-g * a_values / (b_values * b_values), b.shape) if needs[1] else None,
        ]

    return _result("div", [a, b], values, backward)


def scalar_mul(x: ArrayLike, scale: float) -> TensorNode:
    x = as_node(x)
    values = x.values * scale

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g * scale]

    return _result("scalar_mul", [x], values, backward)


def scalar_add(x: ArrayLike, offset: float) -> TensorNode:
    x = as_node(x)
    values = x.values + offset

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g]

    return _result("scalar_add", [x], values, backward)


def relu(x: ArrayLike) -> TensorNode:
    x = as_node(x)
    positive = x.values > 0
    values = np.where(positive, x.values, np.zeros_like(x.values))

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g * positive]

    return _result("relu", [x], values, backward)


def prelu(x: ArrayLike, slope: ArrayLike) -> TensorNode:
    """Parametric ReLU with one slope per channel: x is [B, C, L], slope is [C]."""
    x, slope = as_node(x), as_node(slope)
    if x.ndim != 3 or slope.shape != (x.shape[1],):
        raise InvalidArgumentError("prelu: slope of shape {} does not match input {}".format(slope.shape, x.shape))
    positive = x.values > 0
    scale = slope.values[None, :, None]
    values = np.where(positive, x.values, scale * x.values)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad_x = g * np.where(positive, 1.0, scale).astype(g.dtype) if needs[0] else None
        grad_slope = (g * np.where(positive, 0.0, x.values)).sum(axis=(0, 2)) if needs[1] else None
        return [grad_x, grad_slope]

    return _result("prelu", [x, slope], values, backward)


def sigmoid(x: ArrayLike) -> TensorNode:
    x = as_node(x)
    # exp(-|x|) never overflows
    z = np.exp(-np.abs(x.values))
    values = np.where(x.values >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g * values * (1.0 - values)]

    return _result("sigmoid", [x], values, backward)


def log(x: ArrayLike) -> TensorNode:
    x = as_node(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(x.values)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g / x.values]

    return _result("log", [x], values, backward)


def log10(x: ArrayLike) -> TensorNode:
    return scalar_mul(log(x), 1.0 / np.log(10.0))


def exp(x: ArrayLike) -> TensorNode:
    x = as_node(x)
    with np.errstate(over="ignore"):
        values = np.exp(x.values)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g * values]

    return _result("exp", [x], values, backward)


def square(x: ArrayLike) -> TensorNode:
    x = as_node(x)
    values = x.values * x.values

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [2.0 * g * x.values]

    return _result("square", [x], values, backward)


def sqrt(x: ArrayLike) -> TensorNode:
    x = as_node(x)
    with np.errstate(invalid="ignore"):
        values = np.sqrt(x.values)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        with np.errstate(divide="ignore"):
            return [g * 0.5 / values]

    return _result("sqrt", [x], values, backward)


#
# Reductions and reshaping
#


def _normalize_axis(axis: Optional[int], ndim: int) -> Optional[int]:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise InvalidArgumentError("axis {} out of range for rank {}".format(axis, ndim))
    return axis % ndim


def sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> TensorNode:  # noqa: A001
    x = as_node(x)
    axis = _normalize_axis(axis, x.ndim)
    values = np.sum(x.values, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.shape).copy()]

    return _result("sum", [x], np.asarray(values), backward)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> TensorNode:
    x = as_node(x)
    count = x.values.size if axis is None else x.shape[_normalize_axis(axis, x.ndim)]
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x: ArrayLike, axis: int) -> TensorNode:
    """Maximum along `axis`; the gradient flows to the first maximal element only."""
    x = as_node(x)
    axis = _normalize_axis(axis, x.ndim)
    winners = np.argmax(x.values, axis=axis)
    values = np.take_along_axis(x.values, np.expand_dims(winners, axis), axis=axis).squeeze(axis)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad = np.zeros_like(x.values)
        np.put_along_axis(grad, np.expand_dims(winners, axis), np.expand_dims(g, axis), axis=axis)
        return [grad]

    return _result("amax", [x], values, backward)


def select_channel(x: ArrayLike, index: int) -> TensorNode:
    """x[:, index] for a [B, C, ...] array."""
    x = as_node(x)
    if not 0 <= index < x.shape[1]:
        raise InvalidArgumentError("channel {} out of range for shape {}".format(index, x.shape))
    values = x.values[:, index].copy()

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad = np.zeros_like(x.values)
        grad[:, index] = g
        return [grad]

    return _result("select_channel", [x], values, backward)


def slice_channels(x: ArrayLike, start: int, stop: int) -> TensorNode:
    """x[:, start:stop] for a [B, C, L] array."""
    x = as_node(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise InvalidArgumentError("channel slice {}:{} out of range for shape {}".format(start, stop, x.shape))
    values = x.values[:, start:stop].copy()

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad = np.zeros_like(x.values)
        grad[:, start:stop] = g
        return [grad]

    return _result("slice_channels", [x], values, backward)


def concat_channels(xs: Sequence[ArrayLike]) -> TensorNode:
    xs = [as_node(x) for x in xs]
    values = np.concatenate([x.values for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [g[:, bounds[i] : bounds[i + 1]] if needs[i] else None for i in range(len(xs))]

    return _result("concat_channels", xs, values, backward)


def stack(xs: Sequence[ArrayLike], axis: int = 0) -> TensorNode:
    xs = [as_node(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise InvalidArgumentError("stack: shapes differ: {}".format(sorted(shapes)))
    values = np.stack([x.values for x in xs], axis=axis)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [np.take(g, i, axis=axis) if needs[i] else None for i in range(len(xs))]

    return _result("stack", xs, values, backward)


#
# Convolutions
#


def _conv_output_length(length: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _contract_windows(windows: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """
    windows: [B, G, Cg, Lout, K], weight: [G, Og, Cg, K] -> [B, G, Og, Lout].

    64-bit inputs accumulate input channels one at a time in channel order. A channel whose values are exactly
    zero then adds exact zeros, so the result is bit-identical to the same contraction without that channel.
    """
    if windows.dtype == np.float64:
        batch, groups, channels, length, kernel = windows.shape
        out = np.zeros((batch, groups, weight.shape[1], length), dtype=np.float64)
        for k in range(kernel):
            for c in range(channels):
                out += weight[None, :, :, c, k, None] * windows[:, :, None, c, :, k]
        return out
    return np.einsum("bgclk,gock->bgol", windows, weight, optimize=True)


def conv1d(
    x: ArrayLike,
    weight: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> TensorNode:
    """Cross-correlation of x [B, Cin, L] with weight [Cout, Cin/groups, K], explicit symmetric zero padding."""
    x, weight = as_node(x), as_node(weight)
    bias = as_node(bias) if bias is not None else None
    if x.ndim != 3 or weight.ndim != 3:
        raise InvalidArgumentError("conv1d: expected 3-d input and weight, got {} and {}".format(x.shape, weight.shape))
    batch, in_channels, length = x.shape
    out_channels, group_channels, kernel = weight.shape
    if min(stride, dilation, groups) < 1 or padding < 0:
        raise InvalidArgumentError("conv1d: stride, dilation and groups must be positive, padding non-negative")
    if in_channels % groups or out_channels % groups or in_channels // groups != group_channels:
        raise InvalidArgumentError(
            "conv1d: input channels {} / groups {} does not match weight {}".format(in_channels, groups, weight.shape)
        )
    if bias is not None and bias.shape != (out_channels,):
        raise InvalidArgumentError("conv1d: bias shape {} does not match {} outputs".format(bias.shape, out_channels))
    out_length = _conv_output_length(length, kernel, stride, dilation, padding)
    if out_length < 1:
        raise InvalidArgumentError("conv1d: output length {} < 1 for input length {}".format(out_length, length))

    padded = np.pad(x.values, ((0, 0), (0, 0), (padding, padding)))
    span = dilation * (kernel - 1) + 1
    windows = sliding_window_view(padded, span, axis=2)[:, :, ::stride, ::dilation][:, :, :out_length]
    windows = windows.reshape(batch, groups, group_channels, out_length, kernel)
    grouped_weight = weight.values.reshape(groups, out_channels // groups, group_channels, kernel)
    values = _contract_windows(windows, grouped_weight).reshape(batch, out_channels, out_length)
    if bias is not None:
        values = values + bias.values[None, :, None]

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grouped_g = g.reshape(batch, groups, out_channels // groups, out_length)
        grad_x = grad_w = grad_b = None
        if needs[0]:
            grad_windows = np.einsum("bgol,gock->bgclk", grouped_g, grouped_weight, optimize=True)
            grad_windows = grad_windows.reshape(batch, in_channels, out_length, kernel)
            grad_padded = np.zeros_like(padded)
            reach = stride * (out_length - 1) + 1
            for k in range(kernel):
                start = k * dilation
                grad_padded[:, :, start : start + reach : stride] += grad_windows[..., k]
            grad_x = grad_padded[:, :, padding : padding + length]
        if needs[1]:
            grad_w = np.einsum("bgol,bgclk->gock", grouped_g, windows, optimize=True)
            grad_w = grad_w.reshape(out_channels, group_channels, kernel)
        if bias is not None and needs[2]:
            grad_b = g.sum(axis=(0, 2))
        return [grad_x, grad_w, grad_b]

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return _result("conv1d", inputs, values, backward)


def conv_transpose1d(
    x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None, stride: int = 1, padding: int = 0
) -> TensorNode:
    """Transposed convolution of x [B, Cin, L] with weight [Cin, Cout, K]; the adjoint of conv1d."""
    x, weight = as_node(x), as_node(weight)
    bias = as_node(bias) if bias is not None else None
    if x.ndim != 3 or weight.ndim != 3:
        raise InvalidArgumentError(
            "conv_transpose1d: expected 3-d input and weight, got {} and {}".format(x.shape, weight.shape)
        )
    batch, in_channels, length = x.shape
    weight_in, out_channels, kernel = weight.shape
    if weight_in != in_channels:
        raise InvalidArgumentError(
            "conv_transpose1d: weight {} does not match {} input channels".format(weight.shape, in_channels)
        )
    if stride < 1 or padding < 0:
        raise InvalidArgumentError("conv_transpose1d: stride must be positive, padding non-negative")
    if bias is not None and bias.shape != (out_channels,):
        raise InvalidArgumentError("conv_transpose1d: bias shape {} does not match outputs".format(bias.shape))
    full_length = (length - 1) * stride + kernel
    out_length = full_length - 2 * padding
    if out_length < 1:
        raise InvalidArgumentError("conv_transpose1d: output length {} < 1".format(out_length))

    reach = stride * (length - 1) + 1
    full = np.zeros((batch, out_channels, full_length), dtype=np.result_type(x.dtype, weight.dtype))
    for k in range(kernel):
        if full.dtype == np.float64:
            contribution = np.zeros((batch, out_channels, length), dtype=np.float64)
            for c in range(in_channels):
                contribution += weight.values[None, c, :, k, None] * x.values[:, c, None, :]
        else:
            contribution = np.einsum("bcl,co->bol", x.values, weight.values[:, :, k], optimize=True)
        full[:, :, k : k + reach : stride] += contribution
    values = full[:, :, padding : padding + out_length]
    if bias is not None:
        values = values + bias.values[None, :, None]

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad_full = np.zeros((batch, out_channels, full_length), dtype=g.dtype)
        grad_full[:, :, padding : padding + out_length] = g
        taps = np.stack([grad_full[:, :, k : k + reach : stride] for k in range(kernel)], axis=-1)
        grad_x = np.einsum("bolk,cok->bcl", taps, weight.values, optimize=True) if needs[0] else None
        grad_w = np.einsum("bcl,bolk->cok", x.values, taps, optimize=True) if needs[1] else None
        grad_b = g.sum(axis=(0, 2)) if bias is not None and needs[2] else None
        return [grad_x, grad_w, grad_b]

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return _result("conv_transpose1d", inputs, np.ascontiguousarray(values), backward)


def channel_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike) -> TensorNode:
    """
    Normalizes every (batch, channel) row of x [B, C, L] by its own mean and variance over time, then applies a
    per-channel affine transform. No statistic crosses channels.
    """
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 2:
        raise InvalidArgumentError("channel_norm: need [B, C>=1, L>=2] input, got {}".format(x.shape))
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise InvalidArgumentError("channel_norm: gain/bias must have shape ({},)".format(x.shape[1]))
    centered = x.values - x.values.mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=2, keepdims=True) + NORM_EPSILON)
    normalized = centered * inv_std
    values = gain.values[None, :, None] * normalized + bias.values[None, :, None]

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad_x = grad_gain = grad_bias = None
        if needs[0]:
            grad_normalized = g * gain.values[None, :, None]
            grad_x = inv_std * (
                grad_normalized
                - grad_normalized.mean(axis=2, keepdims=True)
                - normalized * (grad_normalized * normalized).mean(axis=2, keepdims=True)
            )
        if needs[1]:
            grad_gain = (g * normalized).sum(axis=(0, 2))
        if needs[2]:
            grad_bias = g.sum(axis=(0, 2))
        return [grad_x, grad_gain, grad_bias]

    return _result("channel_norm", [x, gain, bias], values.astype(x.dtype), backward)


#
# Mask relaxation
#


def gumbel_keep_probability(logits: ArrayLike, noise: np.ndarray, temperature: float) -> TensorNode:
    """
    Two-class (keep, drop) Gumbel-Softmax per channel. logits and noise are [C, 2]; returns the keep
    probability [C], computed in log space.
    """
    logits = as_node(logits)
    if logits.ndim != 2 or logits.shape[1] != 2 or noise.shape != logits.shape:
        raise InvalidArgumentError("gumbel_keep_probability: expected [C, 2] logits and matching noise")
    if temperature <= 0:
        raise InvalidArgumentError("gumbel_keep_probability: temperature must be positive")
    scores = (logits.values + noise) / temperature
    log_keep = scores[:, 0] - np.logaddexp(scores[:, 0], scores[:, 1])
    values = np.exp(log_keep).astype(logits.dtype)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        local = g * values * (1.0 - values) / temperature
        return [np.stack([local, -local], axis=1)]

    return _result("gumbel_keep_probability", [logits], values, backward)


def binarize_ste(probabilities: ArrayLike, threshold: float) -> TensorNode:
    """
    Forward: 1 where probability > threshold (strictly), else 0.
    Backward: the upstream gradient passed straight through, clipped to [-1, 1].
    """
    probabilities = as_node(probabilities)
    values = (probabilities.values > threshold).astype(probabilities.dtype)

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        return [np.clip(g, -1.0, 1.0)]

    return _result("binarize_ste", [probabilities], values, backward)


def fit_length(x: ArrayLike, length: int) -> TensorNode:
    """Crops or zero-pads the last axis of x [B, C, L] to `length` samples."""
    x = as_node(x)
    if length < 1:
        raise InvalidArgumentError("fit_length: length must be positive, got {}".format(length))
    current = x.shape[-1]
    values = np.zeros(x.shape[:-1] + (length,), dtype=x.dtype)
    kept = min(current, length)
    values[..., :kept] = x.values[..., :kept]

    def backward(g: np.ndarray, needs: Sequence[bool]) -> List[Optional[np.ndarray]]:
        grad = np.zeros_like(x.values)
        grad[..., :kept] = g[..., :kept]
        return [grad]

    return _result("fit_length", [x], values, backward)
