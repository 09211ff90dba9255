"""Differentiable operations: elementwise math, matmul, conv, pooling,
batch norm, the LSTM cell, and activations.

Convolutions are cross-correlations (no kernel flip).  Max-pool routes
gradient to the first (lowest flat index) maximum of each window.  All
kernels run on numpy with sequential reduction order.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .core import Tensor, accumulate_grad, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(-g, b.data.shape))

    return make_node(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        accumulate_grad(a, -g)

    return make_node(-a.data, (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        accumulate_grad(a, g * s)

    return make_node(a.data * s, (a,), bw)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(g, a.data.shape))

    return make_node(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(g, a.data.shape))

    return make_node(np.asarray(out), (a,), bw)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries; target may be a constant array."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if tgt.shape != pred.data.shape:
        raise ShapeError(f"mse: shapes disagree: {pred.data.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out = np.asarray((diff * diff).mean())
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def bw(g):
        d = (2.0 / diff.size) * g * diff
        accumulate_grad(pred, d)
        if isinstance(target, Tensor):
            accumulate_grad(target, -d)

    return make_node(out, parents, bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        accumulate_grad(a, g.reshape(a.data.shape))

    return make_node(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        accumulate_grad(a, g.transpose(inv))

    # a view: tensors are immutable after construction, so sharing is safe
    return make_node(a.data.transpose(axes), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate_grad(t, piece)

    return make_node(out, tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        accumulate_grad(a, full)

    return make_node(a.data[idx], (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return make_node(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ w (+ b); x is (N, in), w is (in, out), b is (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} x {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        accumulate_grad(x, g @ w.data.T)
        accumulate_grad(w, x.data.T @ g)
        if b is not None:
            accumulate_grad(b, g.sum(axis=0))

    return make_node(out, parents, bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        accumulate_grad(a, g * (a.data > 0))

    return make_node(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        accumulate_grad(a, g * (1.0 - out * out))

    return make_node(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        accumulate_grad(a, g * out * (1.0 - out))

    return make_node(out, (a,), bw)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along `axis`, computed with max-subtraction for stability."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.data.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        accumulate_grad(a, out * (g - dot))

    return make_node(out, (a,), bw)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(a: Tensor, kind: str, axis: Optional[int] = None) -> Tensor:
    """Dispatch by name: relu | tanh | sigmoid | softmax (needs axis)."""
    if kind == "softmax":
        if axis is None:
            raise ConfigError("softmax activation requires an axis")
        return softmax(a, axis)
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ConfigError(f"unknown activation kind: {kind!r}") from None


def dropout(a: Tensor, p: float, rng: np.random.Generator, active: bool = True) -> Tensor:
    """Inverted dropout: kept activations divided by (1 - p); identity when off."""
    if not active or p <= 0.0:
        return a
    if p >= 1.0:
        raise ConfigError(f"dropout probability must be < 1, got {p}")
    keep = 1.0 - p
    mask = (rng.random(a.data.shape) < keep).astype(a.data.dtype) / keep

    def bw(g):
        accumulate_grad(a, g * mask)

    return make_node(a.data * mask, (a,), bw)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def conv_out_len(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def _check_conv_geometry(in_dims, kernel, stride, pad, what):
    out = []
    for i, (n, k, s, p) in enumerate(zip(in_dims, kernel, stride, pad)):
        o = conv_out_len(n, k, s, p)
        if o < 1:
            raise ConfigError(
                f"{what}: output axis {i} would be {o} "
                f"(input {n}, kernel {k}, stride {s}, pad {p})")
        out.append(o)
    return tuple(out)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor], stride, padding) -> Tensor:
    """Cross-correlation over (C_in, T, H, W) with kernel (C_out, C_in, kT, kH, kW)."""
    c_in, = x.data.shape[:1]
    if w.data.ndim != 5 or x.data.ndim != 4 or w.data.shape[1] != c_in:
        raise ShapeError(f"conv3d: incompatible shapes {x.data.shape} x {w.data.shape}")
    c_out = w.data.shape[0]
    kern = w.data.shape[2:]
    stride = tuple(stride)
    padding = tuple(padding)
    out_dims = _check_conv_geometry(x.data.shape[1:], kern, stride, padding, "conv3d")

    pt, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    view = sliding_window_view(xp, kern, axis=(1, 2, 3))
    view = view[:, ::stride[0], ::stride[1], ::stride[2]]
    # rows ordered (T', H', W'), columns ordered (C_in, kT, kH, kW)
    n_pos = int(np.prod(out_dims))
    k_len = c_in * int(np.prod(kern))
    patches = np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5, 6)).reshape(n_pos, k_len)
    wm = w.data.reshape(c_out, k_len)
    out = (patches @ wm.T).T.reshape((c_out,) + out_dims)
    if b is not None:
        out = out + b.data[:, None, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.reshape(c_out, n_pos)
        accumulate_grad(w, (gm @ patches).reshape(w.data.shape))
        if b is not None:
            accumulate_grad(b, gm.sum(axis=1))
        dpatch = (gm.T @ wm).reshape(out_dims + (c_in,) + kern)
        dpatch = dpatch.transpose(3, 0, 1, 2, 4, 5, 6)
        dxp = np.zeros_like(xp)
        ot, oh, ow = out_dims
        st, sh, sw = stride
        for it in range(kern[0]):
            for ih in range(kern[1]):
                for iw in range(kern[2]):
                    dxp[:, it:it + ot * st:st, ih:ih + oh * sh:sh, iw:iw + ow * sw:sw] \
                        += dpatch[:, :, :, :, it, ih, iw]
        t, h, wd = x.data.shape[1:]
        accumulate_grad(x, dxp[:, pt:pt + t, ph:ph + h, pw:pw + wd])

    return make_node(out, parents, bw)


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over (C_in, L) with kernel (C_out, C_in, k)."""
    if x.data.ndim != 2 or w.data.ndim != 3 or w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"conv1d: incompatible shapes {x.data.shape} x {w.data.shape}")
    c_in, length = x.data.shape
    c_out, _, k = w.data.shape
    out_len, = _check_conv_geometry((length,), (k,), (stride,), (padding,), "conv1d")

    xp = np.pad(x.data, ((0, 0), (padding, padding)))
    view = sliding_window_view(xp, k, axis=1)[:, ::stride]      # (C_in, L', k)
    patches = np.ascontiguousarray(view.transpose(1, 0, 2)).reshape(out_len, c_in * k)
    wm = w.data.reshape(c_out, c_in * k)
    out = (patches @ wm.T).T
    if b is not None:
        out = out + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        accumulate_grad(w, (g @ patches).reshape(w.data.shape))
        if b is not None:
            accumulate_grad(b, g.sum(axis=1))
        dpatch = (g.T @ wm).reshape(out_len, c_in, k).transpose(1, 0, 2)
        dxp = np.zeros_like(xp)
        for ik in range(k):
            dxp[:, ik:ik + out_len * stride:stride] += dpatch[:, :, ik]
        accumulate_grad(x, dxp[:, padding:padding + length])

    return make_node(out, parents, bw)


def maxpool3d(x: Tensor, window, stride) -> Tensor:
    """Per-window maximum over (C, T, H, W); gradient goes to the first
    (lowest flat index) maximal element of each window."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool3d: expected 4-d input, got {x.data.shape}")
    window = tuple(window)
    stride = tuple(stride)
    for i, (n, k) in enumerate(zip(x.data.shape[1:], window)):
        if k > n:
            raise ConfigError(f"maxpool3d: window {k} exceeds input size {n} on axis {i}")
    out_dims = _check_conv_geometry(x.data.shape[1:], window, stride, (0, 0, 0), "maxpool3d")

    view = sliding_window_view(x.data, window, axis=(1, 2, 3))
    view = view[:, ::stride[0], ::stride[1], ::stride[2]]
    c = x.data.shape[0]
    m = int(np.prod(window))
    windows = np.ascontiguousarray(view).reshape((c,) + out_dims + (m,))
    out = windows.max(axis=-1)
    argmax = windows.argmax(axis=-1)          # first occurrence on ties

    def bw(g):
        wt, wh, ww = window
        it = argmax // (wh * ww)
        ih = (argmax // ww) % wh
        iw = argmax % ww
        ci, ti, hi, wi = np.indices((c,) + out_dims, sparse=False)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ci, ti * stride[0] + it, hi * stride[1] + ih, wi * stride[2] + iw), g)
        accumulate_grad(x, dx)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5,
              channel_axis: int = 0) -> Tensor:
    """Normalize per channel; train mode uses batch statistics and updates
    the running buffers in place, eval mode reads the running buffers."""
    c = x.data.shape[channel_axis]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    axes = tuple(i for i in range(x.data.ndim) if i != channel_axis)
    n = x.data.size // c
    bshape = [1] * x.data.ndim
    bshape[channel_axis] = c
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    if training:
        if n < 2:
            raise ConfigError(
                f"batchnorm: train mode needs >= 2 values per channel, got {n}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var * n / (n - 1)
        inv_std = 1.0 / np.sqrt(var + eps).reshape(bshape)
        xhat = (x.data - mu.reshape(bshape)) * inv_std
        out = gb * xhat + bb

        def bw(g):
            accumulate_grad(beta, g.sum(axis=axes))
            accumulate_grad(gamma, (g * xhat).sum(axis=axes))
            dxhat = g * gb
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            accumulate_grad(x, inv_std / n * (n * dxhat - s1 - xhat * s2))

        return make_node(out, (x, gamma, beta), bw)

    inv_std = 1.0 / np.sqrt(running_var + eps).reshape(bshape)
    xhat = (x.data - running_mean.reshape(bshape)) * inv_std
    out = gb * xhat + bb

    def bw_eval(g):
        accumulate_grad(beta, g.sum(axis=axes))
        accumulate_grad(gamma, (g * xhat).sum(axis=axes))
        accumulate_grad(x, g * gb * inv_std)

    return make_node(out, (x, gamma, beta), bw_eval)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    x (B, D), h_prev/c_prev (B, H); w_ih (D, 4H), w_hh (H, 4H), b (4H,).
    Gate order i, f, g, o with sigmoid/sigmoid/tanh/sigmoid;
    c = f*c_prev + i*g, h = o*tanh(c).  Implemented as one fused graph
    node producing [h c], then split.
    """
    hsz = h_prev.data.shape[1]
    if w_ih.data.shape != (x.data.shape[1], 4 * hsz) or w_hh.data.shape != (hsz, 4 * hsz) \
            or b.data.shape != (4 * hsz,):
        raise ShapeError(
            f"lstm_cell: inconsistent weight shapes for hidden size {hsz}: "
            f"w_ih {w_ih.data.shape}, w_hh {w_hh.data.shape}, b {b.data.shape}")
    z = x.data @ w_ih.data + h_prev.data @ w_hh.data + b.data
    zi, zf, zg, zo = np.split(z, 4, axis=1)
    i = 1.0 / (1.0 + np.exp(-zi))
    f = 1.0 / (1.0 + np.exp(-zf))
    g_ = np.tanh(zg)
    o = 1.0 / (1.0 + np.exp(-zo))
    c = f * c_prev.data + i * g_
    tc = np.tanh(c)
    h = o * tc

    def bw(grad_hc):
        gh = grad_hc[:, :hsz]
        gc = grad_hc[:, hsz:]
        do = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        np.multiply(dc * g_, i * (1.0 - i), out=dz[:, :hsz])
        np.multiply(dc * c_prev.data, f * (1.0 - f), out=dz[:, hsz:2 * hsz])
        np.multiply(dc * i, 1.0 - g_ * g_, out=dz[:, 2 * hsz:3 * hsz])
        np.multiply(do, o * (1.0 - o), out=dz[:, 3 * hsz:])
        accumulate_grad(x, dz @ w_ih.data.T)
        accumulate_grad(h_prev, dz @ w_hh.data.T)
        accumulate_grad(c_prev, dc * f)
        accumulate_grad(w_ih, x.data.T @ dz)
        accumulate_grad(w_hh, h_prev.data.T @ dz)
        accumulate_grad(b, dz.sum(axis=0))

    hc = make_node(np.concatenate([h, c], axis=1), (x, h_prev, c_prev, w_ih, w_hh, b), bw)
    return narrow(hc, 1, 0, hsz), narrow(hc, 1, hsz, hsz)
