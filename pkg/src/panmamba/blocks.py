"""Mamba block, channel-swapping Mamba block and cross-modal Mamba block.

All blocks take token sequences (B, N, C) with N = H*W in row-major order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .ops import (conv1d_depthwise, dwconv2d, image_to_tokens, layer_norm, linear,
                  silu, tokens_to_image)
from .ssm import SsmParams, init_ssm_params, ssm
from .tensor import Tensor, concat, get_default_dtype

LN_EPS = 1e-5


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, LN_EPS)


@dataclass
class Linear:
    W: Tensor
    b: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)


@dataclass
class Conv1d:
    w: Tensor  # (P, k)
    b: Tensor  # (P,)

    def __call__(self, x: Tensor) -> Tensor:
        # (B, N, P) in and out; the convolution itself runs channel-first
        return conv1d_depthwise(x.transpose(0, 2, 1), self.w, self.b).transpose(0, 2, 1)


@dataclass
class MambaBlockParams:
    norm: Norm
    proj_x: Linear
    proj_z: Linear
    conv: Conv1d
    ssm: SsmParams
    proj_out: Linear


@dataclass
class CrossBranch:
    norm: Norm
    proj_x: Linear
    conv: Conv1d
    ssm: SsmParams


@dataclass
class CrossModalParams:
    ms: CrossBranch
    pan: CrossBranch
    proj_z: Linear
    proj_out: Linear
    dw_w: Tensor  # (C, 3, 3)
    dw_b: Tensor  # (C,)


# -- initialization -------------------------------------------------------------
class _Init:
    def __init__(self, rng: np.random.Generator, dtype=None):
        self.rng = rng
        self.dtype = dtype or get_default_dtype()

    def tensor(self, arr, name):
        return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def uniform(self, shape, fan_in, name):
        bound = 1.0 / np.sqrt(fan_in)
        return self.tensor(self.rng.uniform(-bound, bound, shape), name)

    def zeros(self, shape, name):
        return self.tensor(np.zeros(shape), name)

    def norm(self, C):
        return Norm(self.tensor(np.ones(C), "gamma"), self.tensor(np.zeros(C), "beta"))

    def linear(self, cin, cout, bias=True):
        return Linear(self.uniform((cin, cout), cin, "W"),
                      self.uniform((cout,), cin, "b") if bias else None)

    def conv1d(self, P, k):
        return Conv1d(self.uniform((P, k), k, "w"), self.uniform((P,), k, "b"))


def init_mamba_block(C: int, P: int, K: int, k_conv: int, rng: np.random.Generator,
                     dtype=None) -> MambaBlockParams:
    it = _Init(rng, dtype)
    return MambaBlockParams(
        norm=it.norm(C),
        proj_x=it.linear(C, P),
        proj_z=it.linear(C, P),
        conv=it.conv1d(P, k_conv),
        ssm=init_ssm_params(P, K, rng, it.dtype),
        proj_out=it.linear(P, C),
    )


def init_cross_block(C: int, P: int, K: int, k_conv: int, rng: np.random.Generator,
                     dtype=None) -> CrossModalParams:
    it = _Init(rng, dtype)

    def branch():
        return CrossBranch(it.norm(C), it.linear(C, P), it.conv1d(P, k_conv),
                           init_ssm_params(P, K, rng, it.dtype))

    return CrossModalParams(
        ms=branch(),
        pan=branch(),
        proj_z=it.linear(C, P),
        proj_out=it.linear(P, C),
        # zero depthwise conv: the block starts as identity-plus-fusion
        dw_w=it.zeros((C, 3, 3), "dw_w"),
        dw_b=it.zeros((C,), "dw_b"),
    )


# -- forward ----------------------------------------------------------------------
def mamba_core(T: Tensor, p: MambaBlockParams, fused: bool = True, zoh: bool = False) -> Tensor:
    """Mamba block body without the residual add."""
    Tn = p.norm(T)
    x = p.proj_x(Tn)
    z = p.proj_z(Tn)
    xc = silu(p.conv(x))
    y = ssm(xc, p.ssm, fused=fused, zoh=zoh)
    return p.proj_out(y * silu(z))


def mamba_block(T: Tensor, p: MambaBlockParams, fused: bool = True, zoh: bool = False) -> Tensor:
    return mamba_core(T, p, fused, zoh) + T


def channel_swap(T_ms: Tensor, T_pan: Tensor) -> tuple[Tensor, Tensor]:
    """Exchange the second channel half between the two streams."""
    if T_ms.shape != T_pan.shape:
        raise DimensionError(f"channel_swap: {T_ms.shape} vs {T_pan.shape}")
    C = T_ms.shape[-1]
    if C % 2:
        raise ConfigError(f"channel_swap needs an even channel count, got {C}")
    h = C // 2
    S_ms = concat([T_ms[..., :h], T_pan[..., h:]], axis=-1)
    S_pan = concat([T_pan[..., :h], T_ms[..., h:]], axis=-1)
    return S_ms, S_pan


def channel_swap_block(T_ms: Tensor, T_pan: Tensor, p_ms: MambaBlockParams,
                       p_pan: MambaBlockParams, fused: bool = True,
                       zoh: bool = False) -> tuple[Tensor, Tensor]:
    S_ms, S_pan = channel_swap(T_ms, T_pan)
    # residuals go to the unswapped inputs
    return mamba_core(S_ms, p_ms, fused, zoh) + T_ms, mamba_core(S_pan, p_pan, fused, zoh) + T_pan


def _branch(T: Tensor, br: CrossBranch, fused: bool, zoh: bool) -> tuple[Tensor, Tensor]:
    Tn = br.norm(T)
    xc = silu(br.conv(br.proj_x(Tn)))
    return Tn, ssm(xc, br.ssm, fused=fused, zoh=zoh)


def cross_modal_block(T_ms: Tensor, T_pan: Tensor, p: CrossModalParams, H: int, W: int,
                      fused: bool = True, zoh: bool = False) -> Tensor:
    """Fuse PAN into the MS stream; returns updated MS tokens (B, N, C)."""
    if T_ms.shape != T_pan.shape:
        raise DimensionError(f"cross_modal_block: {T_ms.shape} vs {T_pan.shape}")
    if T_ms.shape[1] != H * W:
        raise DimensionError(f"cross_modal_block: {T_ms.shape[1]} tokens but H*W = {H * W}")
    Tn_ms, y_ms = _branch(T_ms, p.ms, fused, zoh)
    _, y_pan = _branch(T_pan, p.pan, fused, zoh)
    gate = silu(p.proj_z(Tn_ms))
    fused_y = y_ms * gate + y_pan * gate
    F = tokens_to_image(p.proj_out(fused_y) + T_ms, H, W)
    return image_to_tokens(dwconv2d(F, p.dw_w, p.dw_b) + F)


def run_block(name: str, fn, *args, **kwargs):
    """Call ``fn`` and tag numeric failures with the block name."""
    try:
        return fn(*args, **kwargs)
    except NumericError as e:
        raise NumericError(f"{name}: {e}") from e
