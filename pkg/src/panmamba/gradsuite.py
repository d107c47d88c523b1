"""Finite-difference suite over every block and the full network.

Shared by the ``grad-check`` command and the test suite. Every parameter is
jittered away from its initial value before checking: zero-initialized
tensors (conv_out, the cross-block depthwise conv) would otherwise zero the
gradient of everything upstream, and the small-timestep SSM init leaves the
delta/A gradients so small that finite-difference roundoff dominates them.

In single precision the reverse-mode gradients are computed in float32 and
compared against double-precision central differences taken at the same
parameter values (float32 values are exact in float64). Float32 differences
are themselves too noisy to resolve errors near 1e-3.
"""
from __future__ import annotations

import numpy as np

from .blocks import (channel_swap_block, cross_modal_block, init_cross_block, init_mamba_block,
                     mamba_block)
from .gradcheck import check_gradients
from .model import NetworkConfig, build_model, forward
from .tensor import Tensor, backward, precision

# tiny shapes keep the full-coverage central differences cheap
C, P, K, KCONV = 4, 8, 2, 4
H = W = 3


def _leaves(obj) -> list[Tensor]:
    from .model import _walk

    return [t for _, t in _walk(obj, "p")]


def _randomize(params: list[Tensor], rng: np.random.Generator, scale: float = 0.3) -> None:
    for t in params:
        t.data = (t.data + rng.normal(0.0, scale, t.shape)).astype(t.dtype)


def _probe(shape, rng, dtype) -> Tensor:
    # random projection of the output: a smooth scalar loss with generic weights
    return Tensor(rng.normal(size=shape).astype(dtype))


def _worst(fn, params, dtype, rng, corrupt, max_entries=None) -> float:
    _randomize(params, rng)
    replace = None
    if dtype == np.float32:
        for p in params:
            p.grad = None
        with precision(np.float32):
            backward(fn())
        replace = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
        for p in params:
            p.data = p.data.astype(np.float64)

    def hook(grads):
        if replace is not None:
            grads[:] = replace
        if corrupt:
            grads[0] *= -1.0

    with precision(np.float64):
        res = check_gradients(fn, params, eps=1e-5, max_entries=max_entries, rng=rng, analytic_hook=hook)
    return max(r.max_rel_err for r in res)


def check_mamba_block(dtype=np.float64, seed: int = 0, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    p = init_mamba_block(C, P, K, KCONV, rng, dtype)
    T = Tensor(rng.normal(size=(1, H * W, C)).astype(dtype), requires_grad=True)
    w = _probe(T.shape, rng, dtype)
    params = [T, *_leaves(p)]
    return _worst(lambda: (mamba_block(T, p) * w).sum(), params, dtype, rng, corrupt)


def check_swap_block(dtype=np.float64, seed: int = 0, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    pm = init_mamba_block(C, P, K, KCONV, rng, dtype)
    pp = init_mamba_block(C, P, K, KCONV, rng, dtype)
    Tm = Tensor(rng.normal(size=(1, H * W, C)).astype(dtype), requires_grad=True)
    Tp = Tensor(rng.normal(size=(1, H * W, C)).astype(dtype), requires_grad=True)
    wm, wp = _probe(Tm.shape, rng, dtype), _probe(Tp.shape, rng, dtype)

    def fn():
        a, b = channel_swap_block(Tm, Tp, pm, pp)
        return (a * wm).sum() + (b * wp).sum()

    return _worst(fn, [Tm, Tp, *_leaves(pm), *_leaves(pp)], dtype, rng, corrupt)


def check_cross_block(dtype=np.float64, seed: int = 0, corrupt: bool = False) -> float:
    rng = np.random.default_rng(seed)
    p = init_cross_block(C, P, K, KCONV, rng, dtype)
    params = _leaves(p)
    Tm = Tensor(rng.normal(size=(1, H * W, C)).astype(dtype), requires_grad=True)
    Tp = Tensor(rng.normal(size=(1, H * W, C)).astype(dtype), requires_grad=True)
    w = _probe(Tm.shape, rng, dtype)
    return _worst(lambda: (cross_modal_block(Tm, Tp, p, H, W) * w).sum(),
                  [Tm, Tp, *params], dtype, rng, corrupt)


def _network(config: NetworkConfig, dtype, seed, corrupt, max_entries) -> float:
    rng = np.random.default_rng(seed)
    model = build_model(config, seed=seed)
    params = model.parameters()
    r = config.ratio
    pan = rng.uniform(0, 1, (1, 1, 8, 8)).astype(dtype)
    lrms = rng.uniform(0, 1, (1, config.ms_bands, 8 // r, 8 // r)).astype(dtype)
    w = _probe((1, config.ms_bands, 8, 8), rng, dtype)
    return _worst(lambda: (forward(model, pan, lrms) * w).sum(), params, dtype, rng, corrupt,
                  max_entries)


def check_network(dtype=np.float64, seed: int = 0, corrupt: bool = False) -> float:
    """Full network on a 1x8x8 PAN, reduced width, every parameter entry."""
    cfg = NetworkConfig(channels=C, state=K, depth_extract=1, depth_swap=1, depth_cross=1,
                        precision=np.dtype(dtype).name)
    return _network(cfg, dtype, seed, corrupt, None)


def check_network_default(dtype=np.float64, seed: int = 0, corrupt: bool = False,
                          max_entries: int = 4) -> float:
    """Full network at the default configuration on a 1x8x8 PAN, sampled entries."""
    return _network(NetworkConfig(precision=np.dtype(dtype).name), dtype, seed, corrupt, max_entries)


SUITE = {
    "mamba_block": check_mamba_block,
    "channel_swap": check_swap_block,
    "cross_modal": check_cross_block,
    "network": check_network,
    "network_default": check_network_default,
}


def run_suite(dtype=np.float64, seed: int = 0, corrupt: bool = False) -> list[tuple[str, float]]:
    with precision(dtype):
        return [(name, fn(dtype=dtype, seed=seed, corrupt=corrupt)) for name, fn in SUITE.items()]
