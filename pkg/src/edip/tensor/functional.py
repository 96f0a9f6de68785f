"""Differentiable primitives.

Images are laid out as ``(batch, channels, height, width)``. Broadcasting is
limited to what the network needs: scalars, and per-channel vectors inside
conv/group-norm.
"""

from __future__ import annotations

import functools
import numbers

import numpy as np
import scipy.sparse as sp

from .core import ShapeError, Tensor, as_tensor, make_result

LEAKY_SLOPE = 0.2
GN_EPS = 1e-5


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, f"operand shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, numbers.Number):
        return make_result("add", a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, numbers.Number):
        return make_result("sub", a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, numbers.Number):
        return make_result("mul", a.data * b, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    _same_shape("mul", a, b)
    return make_result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimensions {a.shape[1]} and {b.shape[0]} differ")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), bw)


def sparse_matvec(matrix: sp.spmatrix, x) -> Tensor:
    """``matrix @ x`` along the last axis of ``x``; the matrix is a constant."""
    x = as_tensor(x)
    n = matrix.shape[1]
    if x.shape[-1] != n:
        raise ShapeError("sparse_matvec", f"matrix has {n} columns, input last dim is {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, n)
    out = (matrix @ flat.T).T.reshape(lead + (matrix.shape[0],))

    def bw(g):
        gx = (matrix.T @ g.reshape(-1, matrix.shape[0]).T).T
        return (gx.reshape(x.shape),)

    return make_result("sparse_matvec", out, (x,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from exc
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_result("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return make_result("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def l2_norm_sq(a) -> Tensor:
    a = as_tensor(a)
    return make_result("l2_norm_sq", np.asarray(np.vdot(a.data, a.data)), (a,), lambda g: (2.0 * g * a.data,))


def l1_norm(a) -> Tensor:
    # subgradient sign(0) = 0
    a = as_tensor(a)
    return make_result("l1_norm", np.asarray(np.abs(a.data).sum()), (a,), lambda g: (g * np.sign(a.data),))


def forward_diff(a, axis: int) -> Tensor:
    """``a[k+1] - a[k]`` along ``axis``; the result is one shorter, no wraparound."""
    a = as_tensor(a)
    if a.shape[axis] < 2:
        raise ShapeError("forward_diff", f"axis {axis} has length {a.shape[axis]}")
    out = np.diff(a.data, axis=axis)

    def bw(g):
        pad = [(0, 0)] * a.ndim
        pad[axis] = (1, 0)
        lo = np.pad(g, pad)
        pad[axis] = (0, 1)
        hi = np.pad(g, pad)
        return (lo - hi,)

    return make_result("forward_diff", out, (a,), bw)


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return make_result("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split branches keep exp() from overflowing
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def concat_channels(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ShapeError("concat_channels", f"cannot concatenate {ref.shape} with {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return make_result("concat_channels", np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is ``(N, C, H, W)``, ``weight`` is ``(O, C, kh, kw)``, ``bias`` is ``(O,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError("conv2d", f"input has {c} channels, kernel expects {cw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError("conv2d", f"bias shape {bias.shape} does not match {o} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("nok,nck->oc", gm, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, parents, bw)


@functools.lru_cache(maxsize=None)
def _upsample_matrix(n: int) -> np.ndarray:
    # half-pixel aligned linear interpolation, edge-clamped
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c, hi_c = min(max(lo, 0), n - 1), min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_upsample_2x(x) -> Tensor:
    """Fixed (non-learned) bilinear 2x upsampling of ``(N, C, H, W)`` maps."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample_2x", f"expected 4-d input, got {x.shape}")
    h, w = x.shape[2:]
    uh, uw = _upsample_matrix(h), _upsample_matrix(w)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make_result("bilinear_upsample_2x", out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def group_norm(x, num_groups: int, gain, bias, eps: float = GN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError("group_norm", f"expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError("group_norm", f"{c} channels not divisible by {num_groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError("group_norm", f"gain/bias shapes {gain.shape}/{bias.shape}, expected ({c},)")
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]

    def bw(g):
        gx = gg = gbias = None
        if gain.requires_grad:
            gg = np.einsum("nchw,nchw->c", g, xhat)
        if bias.requires_grad:
            gbias = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = (g * gain.data[None, :, None, None]).reshape(n, num_groups, -1)
            xh = xhat.reshape(n, num_groups, -1)
            m = xh.shape[2]
            gx = inv * (gxhat - gxhat.sum(axis=2, keepdims=True) / m
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True) / m)
            gx = gx.reshape(x.shape)
        return gx, gg, gbias

    return make_result("group_norm", out, (x, gain, bias), bw)
