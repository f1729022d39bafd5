"""Layer kernels on channel-last tensors ``(N, X, Y, C)``.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""

from __future__ import annotations

import math

import numpy as np


def same_padding(k: int) -> tuple[int, int]:
    """Split ``k - 1`` padding pixels, the odd one going after."""
    total = k - 1
    return total // 2, total - total // 2


def conv_forward(x, W, b, padding="valid", relu=True):
    """2-D convolution (cross-correlation), stride 1, optional fused ReLU.

    ``W`` has shape ``(k, k, c_in, c_out)``. Each kernel tap is one batched
    matmul over the shifted input view.
    """
    k, _, cin, cout = W.shape
    if padding == "same" and k > 1:
        lo, hi = same_padding(k)
        x = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    n, X, Y, _ = x.shape
    xo, yo = X - k + 1, Y - k + 1
    out = np.empty((n, xo, yo, cout), dtype=x.dtype)
    out[...] = b
    for a in range(k):
        for c in range(k):
            out += np.matmul(x[:, a : a + xo, c : c + yo], W[a, c])
    if relu:
        np.maximum(out, 0, out=out)
    return out, (x, W, padding, relu, out if relu else None)


def conv_backward(dout, cache, need_dx=True):
    x, W, padding, relu, act = cache
    k, _, cin, cout = W.shape
    n, X, Y, _ = x.shape
    xo, yo = X - k + 1, Y - k + 1
    if relu:
        dout = dout * (act > 0)
    db = dout.reshape(-1, cout).sum(axis=0)
    dW = np.empty_like(W)
    for a in range(k):
        for c in range(k):
            xs = x[:, a : a + xo, c : c + yo]
            dW[a, c] = np.matmul(xs.swapaxes(2, 3), dout).sum(axis=(0, 1))
    if not need_dx:
        return None, dW, db
    dx = np.zeros(x.shape, dtype=dout.dtype)
    for a in range(k):
        for c in range(k):
            dx[:, a : a + xo, c : c + yo] += np.matmul(dout, W[a, c].T)
    if padding == "same" and k > 1:
        lo, hi = same_padding(k)
        dx = dx[:, lo : X - hi, lo : Y - hi, :]
    return dx, dW, db


def pool_output(length: int, k: int, padding: str) -> int:
    return math.ceil(length / k) if padding == "same" else length // k


def maxpool_forward(x, k, padding="valid"):
    """Non-overlapping ``k x k`` max pooling.

    ``padding="valid"`` drops a partial last window, ``"same"`` keeps it.
    """
    n, X, Y, C = x.shape
    xo, yo = pool_output(X, k, padding), pool_output(Y, k, padding)
    if padding == "same" and (xo * k, yo * k) != (X, Y):
        xp = np.full((n, xo * k, yo * k, C), -np.inf, dtype=x.dtype)
        xp[:, :X, :Y] = x
    else:
        xp = x[:, : xo * k, : yo * k]
    out = xp[:, 0::k, 0::k].copy()
    for a in range(k):
        for c in range(k):
            if a or c:
                np.maximum(out, xp[:, a::k, c::k], out=out)
    return out, (xp, out, x.shape, k)


def maxpool_backward(dout, cache):
    """Each window's gradient goes to exactly one input: its first maximum
    in row-major window order."""
    xp, out, xshape, k = cache
    g = np.zeros(xp.shape, dtype=dout.dtype)
    claimed = np.zeros(out.shape, dtype=bool)
    for a in range(k):
        for c in range(k):
            hit = (xp[:, a::k, c::k] == out) & ~claimed
            g[:, a::k, c::k] = dout * hit
            claimed |= hit
    X, Y = xshape[1], xshape[2]
    dx = np.zeros(xshape, dtype=dout.dtype)
    mx, my = min(X, g.shape[1]), min(Y, g.shape[2])
    dx[:, :mx, :my] = g[:, :mx, :my]
    return dx


def dense_forward(x, W, b, relu=True):
    out = x @ W + b
    if relu:
        np.maximum(out, 0, out=out)
    return out, (x, W, relu, out if relu else None)


def dense_backward(dout, cache):
    x, W, relu, act = cache
    if relu:
        dout = dout * (act > 0)
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x, rate, rng):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout * keep


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))
