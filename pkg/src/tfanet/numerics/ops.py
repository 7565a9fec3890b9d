"""Differentiable primitives used by the reconstruction model.

Every function accepts :class:`Tensor` or array-likes, returns a new
:class:`Tensor`, and registers a vector-Jacobian product on the active tape.
Results are checked for finiteness.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DimensionError, NonFiniteError, Tensor, as_tensor, record

GELU_COEF = math.sqrt(2.0 / math.pi)


def _out(arr: np.ndarray, op: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.name = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data + b.data, "add")
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data - b.data, "sub")
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data * b.data, "mul")
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = a.data / b.data
    out = _out(q, "div")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * q / b.data, b.shape)
        return ga, gb

    return record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(_out(-a.data, "neg"), (a,), lambda g: (-g,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant; gradient passes where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    out = _out(np.where(keep, a.data, floor), "maximum")
    return record(out, (a,), lambda g: (g * keep,))


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_COEF * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = _out(0.5 * x * (1.0 + th), "gelu")

    def vjp(g):
        dinner = GELU_COEF * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return record(out, (a,), vjp)


# reductions and shape plumbing ---------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = _out(np.sum(a.data, axis=axis, keepdims=keepdims), "sum")

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = _out(a.data.reshape(shape), "reshape")
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _out(np.transpose(a.data, axes), "transpose")
    return record(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _out(np.concatenate([t.data for t in ts], axis=axis), "concat")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, ts, vjp)


def take(a, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter-back gradient."""
    a = as_tensor(a)
    out = _out(np.array(a.data[index]), "take")

    def vjp(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return record(out, (a,), vjp)


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _out(np.matmul(a.data, b.data), "matmul")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), vjp)


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _out(p, "softmax")

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(out, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last axis {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gamma.data + beta.data, "layer_norm")

    def vjp(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return record(out, (a, gamma, beta), vjp)


def vector_norm(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm over the last axis, floored at ``eps``.

    The gradient at an exact zero vector is taken as zero.
    """
    a = as_tensor(a)
    n = np.sqrt((a.data**2).sum(axis=-1))
    floored = np.maximum(n, eps)
    out = _out(floored, "vector_norm")

    def vjp(g):
        active = (n > eps) & (n > 0)
        safe = np.where(active, n, 1.0)
        scale = np.where(active, g / safe, 0.0)
        return (a.data * scale[..., None],)

    return record(out, (a,), vjp)


# image kernels ----------------------------------------------------------------

def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an ``H x W x Cin`` map with a ``k x k x Cin x Cout`` kernel.

    Zero padding; no kernel flip.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects HxWxC input and kxkxCinxCout kernel, got {x.shape}, {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} or padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} < 1 for input {x.shape}, kernel {kernel.shape}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: ho x wo x cin x kh x kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = _out((cols @ kmat).reshape(ho, wo, cout), "conv2d")

    def vjp(g):
        g2 = g.reshape(ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ kmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape)
        for ky in range(kh):
            for kx in range(kw):
                gxp[ky : ky + (ho - 1) * stride + 1 : stride,
                    kx : kx + (wo - 1) * stride + 1 : stride] += gcols[:, :, ky, kx]
        gx = gxp[padding : padding + h, padding : padding + w]
        return gx, gk

    return record(out, (x, kernel), vjp)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-center linear interpolation weights, shape ``n_out x n_in``.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``.
    """
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize of an ``H x W x C`` map (half-pixel centers, edge clamp)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects HxWxC, got {x.shape}")
    h, w, _ = x.shape
    if (h, w) == (target_h, target_w):
        out = _out(x.data.copy(), "bilinear_resize")
        return record(out, (x,), lambda g: (g,))
    rh = resize_matrix(h, target_h)
    rw = resize_matrix(w, target_w)
    out = _out(np.einsum("ah,hwc,bw->abc", rh, x.data, rw, optimize=True), "bilinear_resize")
    return record(out, (x,), lambda g: (np.einsum("ah,abc,bw->hwc", rh, g, rw, optimize=True),))
