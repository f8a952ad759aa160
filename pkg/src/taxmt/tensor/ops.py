"""Differentiable operations.

Shapes never broadcast implicitly: binary elementwise ops demand equal
shapes, and ``expand`` is the explicit way to tile a tensor.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np

from .core import DimensionError, Tensor, as_tensor, make_result


def _same_shape(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape {a.shape} vs {b.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data * c, (x,), lambda g: (g * c,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single tape node."""
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape("add_n", tensors[0], t)
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return make_result(out, tensors, lambda g: tuple(g for _ in tensors))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of (..., n, k) by (..., k, m) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` for x of shape (n, k), weight (k, m), bias (m,)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, expand(bias, out.shape))
    return out


# -- shape manipulation -------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_result(data, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def expand(x, shape: Sequence[int]) -> Tensor:
    """Tile ``x`` to ``shape``; new dims are leading, size-1 dims may grow."""
    x = as_tensor(x)
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s != t and s != 1 for s, t in zip(x.shape, shape[lead:])):
        raise DimensionError(f"expand: shape {x.shape} vs {shape}")
    grown = tuple(i + lead for i, (s, t) in enumerate(zip(x.shape, shape[lead:])) if s != t)
    src = x.shape

    def back(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if grown:
            g = g.sum(axis=tuple(i - lead for i in grown), keepdims=True)
        return (g.reshape(src),)

    return make_result(np.broadcast_to(x.data, shape).copy(), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape))):
            raise DimensionError(f"concat: shape {ref.shape} vs {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def slice(x, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices and Ellipsis."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, (int, np.integer, builtins.slice, type(Ellipsis))):
            raise TypeError(f"slice supports ints, slices and Ellipsis, got {type(part).__name__}")
    src = x.shape

    def back(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[index]), (x,), back)


def embedding_lookup(weight, ids) -> Tensor:
    """Rows of ``weight`` (V, E) selected by integer ``ids`` of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding_lookup: token id out of range [0, {vocab})")
    src = weight.shape

    def back(g):
        gw = np.zeros(src)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, src[1]))
        return (gw,)

    return make_result(weight.data[ids], (weight,), back)


# -- reductions -------------------------------------------------------------

def sum(x) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return make_result(np.array(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    src, n = x.shape, x.size
    return make_result(np.array(x.data.mean()), (x,), lambda g: (np.full(src, float(g) / n),))


# -- nonlinearities -----------------------------------------------------------

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return make_result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: shape {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gain.data + bias.data, (x, gain, bias), back)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x, mask, value: float = -1e9) -> Tensor:
    """Replace entries where boolean ``mask`` is true by a constant."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_fill: shape {x.shape} vs mask {mask.shape}")
    keep = ~mask
    return make_result(np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def cross_entropy(logits, target_ids, ignore_id: int | None = None, reduction: str = "mean") -> Tensor:
    """Token cross-entropy of (N, V) logits against N integer targets.

    Positions whose target equals ``ignore_id`` contribute neither loss nor
    gradient. ``reduction="mean"`` averages over the kept positions.
    """
    logits = as_tensor(logits)
    targets = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: shape {logits.shape} vs targets {targets.shape}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    if np.any((targets[keep] < 0) | (targets[keep] >= logits.shape[1])):
        raise IndexError("cross_entropy: target id out of range")
    safe = np.where(keep, targets, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    nll = -logp[rows, safe] * keep
    count = int(keep.sum())
    if reduction == "mean":
        denom = float(max(count, 1))
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        p = np.exp(logp)
        p[rows, safe] -= 1.0
        p *= keep[:, None] * (float(g) / denom)
        return (p,)

    return make_result(np.array(nll.sum() / denom), (logits,), back)
