"""The closed primitive set every downstream module is built from.

Compute primitives: matrix multiply, strided 2D convolution, adaptive
average pooling, softmax, layer normalization, GELU, mean/sum over an axis,
concatenation, and elementwise arithmetic (including exp/log/sqrt/abs/max,
which the arithmetic family covers). Structural data movement (reshape,
transpose, stack, slicing) reshuffles values without computing on them.

Every primitive participates in reverse-mode differentiation; gradients of
each one are pinned against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Parameter, ShapeError, Tensor, as_tensor, from_op

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _is_constant(t: Tensor) -> bool:
    return not isinstance(t, Parameter) and t._vjp is None


def _pair(a, b):
    """Coerce both operands to tensors of one dtype.

    Only constants (graph leaves without gradients) may be recast; recasting
    a tracked node would silently detach it, so that case raises instead.
    """
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.dtype != b.dtype:
        if _is_constant(b):
            b = Tensor(b.data, dtype=a.dtype)
        elif _is_constant(a):
            a = Tensor(a.data, dtype=b.dtype)
        else:
            raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _pair(a, b)
    return from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _pair(a, b)
    return from_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return from_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return from_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: (g * (0.5 / out),))


def absval(a):
    a = as_tensor(a)
    return from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b):
    # Subgradient convention: ties route to the first operand.
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    return from_op(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        ),
    )


# -- reductions ----------------------------------------------------------------

def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // out.size

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return from_op(np.asarray(out), (a,), vjp)


def sum_along(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return from_op(np.asarray(out), (a,), vjp)


# -- structural ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.shape
    out = a.data.reshape(shape)
    return from_op(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return from_op(
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return from_op(np.asarray(out), (a,), vjp)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat rank mismatch: operand 0 has rank "
                             f"{ref.ndim}, operand {i} has rank {t.ndim}")
        for ax in range(ref.ndim):
            if ax != axis % ref.ndim and t.shape[ax] != ref.shape[ax]:
                raise ShapeError(
                    f"concat mismatch on axis {ax}: operand 0 extent "
                    f"{ref.shape[ax]}, operand {i} extent {t.shape[ax]}"
                )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in pieces)

    return from_op(np.stack([t.data for t in tensors], axis=axis),
                   tuple(tensors), vjp)


# -- dense linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner axes differ: a axis {a.ndim - 1} extent "
            f"{a.shape[-1]}, b axis {max(b.ndim - 2, 0)} extent "
            f"{b.shape[-2 if b.ndim > 1 else 0]}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data[None, :]
        at = np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data[:, None]
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data) if a.ndim == 1 else g[..., None] * b.data
            gb = at @ g if a.ndim > 1 else a.data * g
            return (_unbroadcast(np.asarray(ga), a.shape),
                    _unbroadcast(np.asarray(gb), b.shape))
        if a.ndim == 1:
            ga = g @ bt
            gb = np.multiply.outer(a.data, g)
        else:
            ga = np.matmul(g, bt)
            gb = np.matmul(at, g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return from_op(out, (a, b), vjp)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Strided 2D convolution, channels last.

    x: (N, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,) or None.
    Zero padding of `pad` rows/cols on each spatial side.
    """
    x = as_tensor(x)
    w = as_tensor(w, dtype=x.dtype)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants x rank 4 and w rank 4, got {x.ndim}/{w.ndim}")
    n, h, ww_in, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: x axis 3 extent {cin}, "
                         f"w axis 2 extent {wcin}")
    hp, wp = h + 2 * pad, ww_in + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    yy = (stride * np.arange(ho)[:, None, None, None]
          + np.arange(kh)[None, None, :, None])          # (ho,1,kh,1)
    xx = (stride * np.arange(wo)[None, :, None, None]
          + np.arange(kw)[None, None, None, :])          # (1,wo,1,kw)
    patches = xp[:, yy, xx, :]                           # (n,ho,wo,kh,kw,cin)
    flat = patches.reshape(n, ho, wo, kh * kw * cin)
    wflat = w.data.reshape(kh * kw * cin, cout)
    out = flat @ wflat
    if b is not None:
        b = as_tensor(b, dtype=x.dtype)
        out = out + b.data

    def vjp(g):
        gw = np.tensordot(flat, g, axes=([0, 1, 2], [0, 1, 2]))
        gpatches = (g @ wflat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (np.arange(n)[:, None, None, None, None],
                        yy[None], xx[None]), gpatches)
        gx = gxp[:, pad:pad + h, pad:pad + ww_in, :] if pad else gxp
        gb = g.sum(axis=(0, 1, 2)) if b is not None else None
        if b is None:
            return (gx, gw.reshape(w.shape))
        return (gx, gw.reshape(w.shape), gb)

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, vjp)


def adaptive_avg_pool2d(x):
    """Pool (..., H, W, C) down to (..., C) by global spatial averaging."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"adaptive_avg_pool2d wants rank >= 3, got {x.ndim}")
    h, w = x.shape[-3], x.shape[-2]
    out = x.data.mean(axis=(-3, -2))

    def vjp(g):
        g = np.expand_dims(g, (-3, -2)) / (h * w)
        return (np.broadcast_to(g, x.shape).copy(),)

    return from_op(out, (x,), vjp)


# -- nonlinearities and normalization -------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return from_op(out, (x,), vjp)


def gelu(x):
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return from_op(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, dtype=x.dtype)
    beta = as_tensor(beta, dtype=x.dtype)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm scale/shift must have shape ({d},), got "
                         f"{gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return (gx, ggamma, gbeta)

    return from_op(out, (x, gamma, beta), vjp)


def linear(x, w, b=None):
    """x @ w (+ b): the matmul primitive with a bias convenience."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out
