"""Differentiable layer ops built on :mod:`panmamba.tensor`.

Axis conventions: token sequences are ``(B, N, C)``; ``conv1d_depthwise``
works channel-first ``(B, P, N)``; images are ``(B, C, H, W)``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError
from .tensor import Tensor, _operand


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y[..., j] = sum_i x[..., i] * W[i, j] + b[j]``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    cin, cout = Wd.shape
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ Wd.T
        gW = xd.reshape(-1, cin).T @ g.reshape(-1, cout)
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, cout).sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return Tensor._from_op(out, parents, bw, "linear")


def conv1d_depthwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Causal depthwise convolution over the last axis of ``x`` (B, P, N).

    ``y[b,p,t] = b[p] + sum_j w[p,j] * x[b,p,t-k+1+j]`` with zeros before t=0.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[1] or b.shape != (x.shape[1],):
        raise DimensionError(f"conv1d_depthwise: x {x.shape}, w {w.shape}, b {b.shape}")
    B, P, N = x.shape
    k = w.shape[1]
    xp = np.zeros((B, P, N + k - 1), dtype=x.dtype)
    xp[:, :, k - 1:] = x.data
    wd = w.data
    out = np.broadcast_to(b.data[None, :, None], (B, P, N)).astype(x.dtype, copy=True)
    for j in range(k):
        out += wd[None, :, j, None] * xp[:, :, j:j + N]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[:, :, j:j + N] += wd[None, :, j, None] * g
            gw[:, j] = (g * xp[:, :, j:j + N]).sum(axis=(0, 2))
        return gxp[:, :, k - 1:], gw, g.sum(axis=(0, 2))

    return Tensor._from_op(out, (x, w, b), bw, "conv1d_depthwise")


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding ``(k-1)/2``."""
    Cout, Cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.ndim != 4 or x.shape[1] != Cin:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    B, _, H, W = x.shape
    p = (k - 1) // 2
    xp = _pad2d(x.data, p)
    cols = np.empty((B, Cin, k, k, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    cols = cols.reshape(B, Cin * k * k, H * W)
    w2 = w.data.reshape(Cout, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(B, Cout, H, W)

    def bw(g):
        g2 = g.reshape(B, Cout, H * W)
        gw = np.zeros_like(w2)
        for n in range(B):
            gw += g2[n] @ cols[n].T
        gcols = (w2.T @ g2).reshape(B, Cin, k, k, H, W)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + H, j:j + W] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = (gx, gw.reshape(w.shape))
        return grads if b is None else grads + (g.sum(axis=(0, 2, 3)),)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, bw, "conv2d")


def dwconv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise same-size 2-D convolution; ``w`` is (C, k, k)."""
    C, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"dwconv2d needs an odd square kernel, got {k}x{k2}")
    if x.ndim != 4 or x.shape[1] != C:
        raise DimensionError(f"dwconv2d: input {x.shape} does not match weight {w.shape}")
    B, _, H, W = x.shape
    p = (k - 1) // 2
    xp = _pad2d(x.data, p)
    wd = w.data
    out = np.broadcast_to(b.data[None, :, None, None], x.shape).astype(x.dtype, copy=True)
    for i in range(k):
        for j in range(k):
            out += wd[None, :, i, j, None, None] * xp[:, :, i:i + H, j:j + W]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + H, j:j + W] += wd[None, :, i, j, None, None] * g
                gw[:, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, (x, w, b), bw, "dwconv2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over its last axis, then scale and shift."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gg = (g * xhat).reshape(-1, C).sum(axis=0)
        gb = g.reshape(-1, C).sum(axis=0)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), bw, "layer_norm")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return Tensor._from_op(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))``, evaluated without overflow for large ``x``."""
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * expit(xd),), "softplus")


def tokens_to_image(t: Tensor, H: int, W: int) -> Tensor:
    """(B, H*W, C) tokens -> (B, C, H, W), token index ``n = h*W + w``."""
    B, N, C = t.shape
    if N != H * W:
        raise DimensionError(f"cannot reshape {N} tokens to {H}x{W}")
    return t.transpose(0, 2, 1).reshape(B, C, H, W)


def image_to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C) in row-major spatial order."""
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def constant(x, like: Tensor) -> Tensor:
    return _operand(x, like)
