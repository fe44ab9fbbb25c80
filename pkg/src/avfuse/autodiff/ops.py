"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and returns a tensor whose
backward closure maps the output gradient to input gradients. Broadcasting
follows numpy's trailing-dimension rules; gradients are summed back to the
input shapes.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, get_dtype, make_result

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        dinner = x2 * (3 * 0.044715 * _SQRT_2_OVER_PI)
        dinner += _SQRT_2_OVER_PI
        sech2 = 1.0 - t * t
        sech2 *= xd
        sech2 *= dinner
        sech2 += 1.0 + t
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return make_result(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


# -- reductions and shape ops -------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing (the ``slice`` op)."""
    shape, dtype = x.shape, x.data.dtype
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {shape}: {exc}") from None

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, "concat")


def pad_time(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad axis 1 of a [B, T, C] tensor."""
    b, t, c = x.shape
    out = np.zeros((b, t + before + after, c), dtype=x.data.dtype)
    out[:, before:before + t] = x.data
    return make_result(out, (x,), lambda g: (g[:, before:before + t],), "pad")


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]} (x {x.shape}, W {weight.shape})")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({wd.shape[1]},)")
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, backward, "linear")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 1) -> Tensor:
    """Temporal convolution on [B, T, C_in] with weight [K, C_in, C_out].

    Output length is ``(T + 2*padding - K) // stride + 1``.
    """
    bsz, t, cin = x.shape
    k, wcin, cout = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv1d: input channels {cin} != weight channels {wcin}")
    tp = t + 2 * padding
    if tp < k:
        raise ShapeError(f"conv1d: padded length {tp} shorter than kernel {k}")
    tout = (tp - k) // stride + 1
    xp = np.zeros((bsz, tp, cin), dtype=x.data.dtype)
    xp[:, padding:padding + t] = x.data
    starts = np.arange(tout) * stride
    # cols[b, o, j, c] = xp[b, starts[o] + j, c]
    gather = starts[:, None] + np.arange(k)[None, :]
    cols = xp[:, gather, :].reshape(bsz * tout, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data
    out = out.reshape(bsz, tout, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(bsz * tout, cout)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(bsz, tout, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                np.add.at(gxp, (slice(None), starts + j), gcols[:, :, j, :])
            gx = gxp[:, padding:padding + t]
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return make_result(out, parents, backward, "conv1d")


# -- normalisation and probability ---------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable bool, True = keep) zeroes excluded entries."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise ShapeError(f"softmax: a row along axis {axis} is fully masked (shape {x.shape})")
    e = np.exp(xd - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    d = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layernorm: {name} shape {p.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * gamma.data if gamma is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_result(out, parents, backward, "layernorm")


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over axis 0 of [N, C].

    In training mode the running statistics are updated in place with
    ``momentum``, independent of whether gamma/beta are trainable.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm1d: expected [N, {gamma.shape[0]}], got {x.shape}")
    xd = x.data
    n = xd.shape[0]
    if training:
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / max(n - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        if training:
            gx = rstd * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        else:
            gx = gh * rstd
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batchnorm1d")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: identity at inference, scale by 1/(1-p) when training."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode requires an RNG handle")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def embedding(ids: np.ndarray, weight: Tensor) -> Tensor:
    ids = np.asarray(ids)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise ShapeError(f"embedding_lookup: token id {int(bad)} outside vocabulary of size {vocab}")
    wshape, dtype = weight.shape, weight.data.dtype

    def backward(g):
        full = np.zeros(wshape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (full,)

    return make_result(weight.data[ids], (weight,), backward, "embedding_lookup")


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: Optional[np.ndarray] = None,
    reduction: str = "mean",
) -> Tensor:
    """Token-level cross entropy over the last axis.

    ``mask`` selects scored positions; ``reduction`` is "sum" or "mean" (mean
    over scored positions).
    """
    v = logits.shape[-1]
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy: target id outside [0, {v})")
    w = np.ones(targets.shape, dtype=logits.data.dtype) if mask is None else np.asarray(mask, dtype=logits.data.dtype)
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    wf = w.reshape(-1)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp_t = (z[np.arange(len(t)), t] - m[:, 0]) - np.log(s[:, 0])
    total = -(wf * logp_t).sum()
    scale = 1.0
    if reduction == "mean":
        denom = wf.sum()
        if denom <= 0:
            raise ValueError("cross_entropy: no scored positions")
        scale = 1.0 / denom
    elif reduction != "sum":
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    out = np.asarray(total * scale, dtype=logits.data.dtype)

    def backward(g):
        p = e / s
        p[np.arange(len(t)), t] -= 1.0
        return ((p * (wf[:, None] * scale * g)).reshape(logits.shape),)

    return make_result(out, (logits,), backward, "cross_entropy")


# -- dispatcher ---------------------------------------------------------------

_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "gelu": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "embedding_lookup": lambda ids, w, **kw: embedding(ids, w),
    "linear": linear,
    "dropout": dropout,
    "batchnorm1d": batchnorm1d,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": index,
    "transpose": transpose,
    "cross_entropy": cross_entropy,
    "conv1d": conv1d,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {builtins.sorted(_KINDS)}") from None
    return fn(*inputs, **attrs)
