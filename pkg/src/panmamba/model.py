"""Full pan-sharpening network, parameter/FLOP counting and checkpoints.

Pipeline: bicubic-upsample LRMS to the PAN grid; 3x3 convs lift PAN and MS to
C channels; tokens go through per-branch Mamba blocks, channel-swap stages and
cross-modal blocks (which keep re-reading the same PAN tokens); a 3x3 conv maps
the MS tokens back to S bands and the upsampled LRMS is added on top.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .blocks import (CrossModalParams, MambaBlockParams, channel_swap_block, cross_modal_block,
                     init_cross_block, init_mamba_block, mamba_block, run_block)
from .data import bicubic_upsample
from .errors import ConfigError, CorruptionError, DimensionError, FormatError
from .ops import conv2d, image_to_tokens, tokens_to_image
from .tensor import Tensor

CKPT_MAGIC = b"PMCK"
CKPT_VERSION = 1


@dataclass
class NetworkConfig:
    channels: int = 32
    state: int = 16
    expansion: int = 2
    conv_kernel: int = 4
    # calibrated against 0.1827M params / 3.0088 GFLOPs at C=32, 128x128
    depth_extract: int = 4
    depth_swap: int = 1
    depth_cross: int = 1
    ratio: int = 4
    ms_bands: int = 4
    enable_swap: bool = True
    enable_cross: bool = True
    precision: str = "float32"
    fused_scan: bool = True
    zoh: bool = False

    @property
    def inner(self) -> int:
        return self.expansion * self.channels

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def validate(self) -> NetworkConfig:
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if self.ratio < 1:
            raise ConfigError(f"ratio must be >= 1, got {self.ratio}")
        for name in ("depth_extract", "depth_swap", "depth_cross"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("state", "expansion", "conv_kernel", "ms_bands"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        return self


@dataclass
class Conv2dParams:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)


@dataclass
class SwapStage:
    ms: MambaBlockParams
    pan: MambaBlockParams


@dataclass
class PanMambaModel:
    config: NetworkConfig
    conv_in_pan: Conv2dParams
    conv_in_ms: Conv2dParams
    extract_ms: list[MambaBlockParams] = field(default_factory=list)
    extract_pan: list[MambaBlockParams] = field(default_factory=list)
    swap: list[SwapStage] = field(default_factory=list)
    cross: list[CrossModalParams] = field(default_factory=list)
    conv_out: Conv2dParams | None = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("conv_in_pan", "conv_in_ms", "extract_ms", "extract_pan", "swap", "cross", "conv_out"):
            yield from _walk(getattr(self, name), name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def __call__(self, pan, lrms) -> Tensor:
        return forward(self, pan, lrms)


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, NetworkConfig):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if val is not None:
                yield from _walk(val, f"{prefix}.{f.name}")


def _conv_params(rng, cin, cout, k, dtype, zero=False) -> Conv2dParams:
    if zero:
        w = np.zeros((cout, cin, k, k))
        b = np.zeros(cout)
    else:
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, (cout, cin, k, k))
        b = rng.uniform(-bound, bound, cout)
    return Conv2dParams(Tensor(w.astype(dtype), requires_grad=True, name="w"),
                        Tensor(b.astype(dtype), requires_grad=True, name="b"))


def build_model(config: NetworkConfig | None = None, seed: int = 0) -> PanMambaModel:
    """Initialize a model; conv_out starts at zero so the output begins as the upsampled LRMS."""
    cfg = (config or NetworkConfig()).validate()
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    C, P, K, kc = cfg.channels, cfg.inner, cfg.state, cfg.conv_kernel
    model = PanMambaModel(
        config=cfg,
        conv_in_pan=_conv_params(rng, 1, C, 3, dt),
        conv_in_ms=_conv_params(rng, cfg.ms_bands, C, 3, dt),
    )
    model.extract_ms = [init_mamba_block(C, P, K, kc, rng, dt) for _ in range(cfg.depth_extract)]
    model.extract_pan = [init_mamba_block(C, P, K, kc, rng, dt) for _ in range(cfg.depth_extract)]
    if cfg.enable_swap:
        model.swap = [SwapStage(init_mamba_block(C, P, K, kc, rng, dt), init_mamba_block(C, P, K, kc, rng, dt))
                      for _ in range(cfg.depth_swap)]
    if cfg.enable_cross:
        model.cross = [init_cross_block(C, P, K, kc, rng, dt) for _ in range(cfg.depth_cross)]
    model.conv_out = _conv_params(rng, C, cfg.ms_bands, 3, dt, zero=True)
    return model


def project_and_flatten(img: Tensor, conv: Conv2dParams) -> Tensor:
    """3x3 conv then row-major flatten: token ``n = h*W + w``."""
    return image_to_tokens(conv(img))


def _as_batch(x, dtype, what) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"{what}: expected (B, C, H, W), got {arr.shape}")
    return np.ascontiguousarray(arr, dtype=dtype)


def forward(model: PanMambaModel, pan, lrms) -> Tensor:
    """Fused HRMS (B, S, H, W) from PAN (B, 1, H, W) and LRMS (B, S, H/r, W/r)."""
    cfg = model.config
    r = cfg.ratio
    pan = _as_batch(pan, cfg.dtype, "pan")
    lrms = _as_batch(lrms, cfg.dtype, "lrms")
    B, _, H, W = pan.shape
    if pan.shape[1] != 1 or lrms.shape[1] != cfg.ms_bands:
        raise DimensionError(f"expected 1 PAN band and {cfg.ms_bands} MS bands, "
                             f"got {pan.shape[1]} and {lrms.shape[1]}")
    if H % r or W % r or lrms.shape[2:] != (H // r, W // r) or lrms.shape[0] != B:
        raise DimensionError(f"PAN {pan.shape} and LRMS {lrms.shape} inconsistent with ratio {r}")
    m_up = Tensor(bicubic_upsample(lrms, r))
    kw = dict(fused=cfg.fused_scan, zoh=cfg.zoh)

    T_ms = project_and_flatten(m_up, model.conv_in_ms)
    T_pan = project_and_flatten(Tensor(pan), model.conv_in_pan)
    for i, blk in enumerate(model.extract_ms):
        T_ms = run_block(f"extract_ms.{i}", mamba_block, T_ms, blk, **kw)
    for i, blk in enumerate(model.extract_pan):
        T_pan = run_block(f"extract_pan.{i}", mamba_block, T_pan, blk, **kw)
    if cfg.enable_swap:
        for i, st in enumerate(model.swap):
            T_ms, T_pan = run_block(f"swap.{i}", channel_swap_block, T_ms, T_pan, st.ms, st.pan, **kw)
    if cfg.enable_cross:
        for i, cp in enumerate(model.cross):
            T_ms = run_block(f"cross.{i}", cross_modal_block, T_ms, T_pan, cp, H, W, **kw)
    return model.conv_out(tokens_to_image(T_ms, H, W)) + m_up


# -- counting ---------------------------------------------------------------------
def count_params(model: PanMambaModel) -> int:
    return int(sum(t.size for t in model.parameters()))


def mamba_block_macs(C: int, P: int, K: int, k_conv: int, N: int) -> dict[str, int]:
    """Multiply-accumulates of one Mamba block over N tokens, by op class."""
    return {
        "linear": N * (C * P * 2 + P * C),
        "conv1d": N * P * k_conv,
        "ssm_proj": N * (2 * P * K + P * P),
        "scan": 3 * N * P * K,
    }


def cross_block_macs(C: int, P: int, K: int, k_conv: int, N: int) -> dict[str, int]:
    branch = {
        "linear": N * C * P,
        "conv1d": N * P * k_conv,
        "ssm_proj": N * (2 * P * K + P * P),
        "scan": 3 * N * P * K,
    }
    out = {k: 2 * v for k, v in branch.items()}
    out["linear"] += N * (C * P + P * C)
    out["dwconv"] = N * C * 9
    return out


def flop_breakdown(config: NetworkConfig, H: int, W: int) -> dict[str, int]:
    """Multiply-accumulates of one forward pass at PAN size H x W, by op class.

    Counted: weighted layers (linear, conv) and the scan recurrence
    (``a*h``, ``b*x`` and the ``C.h`` readout, 3 per state entry per token).
    Elementwise work (norms, activations, discretization, gating, residuals)
    is not counted, matching common layer-profiler conventions.
    """
    cfg = config
    N = H * W
    C, P, K, kc, S = cfg.channels, cfg.inner, cfg.state, cfg.conv_kernel, cfg.ms_bands
    total: dict[str, int] = {"conv2d": N * 9 * C * (1 + 2 * S)}

    def add(d, times=1):
        for k, v in d.items():
            total[k] = total.get(k, 0) + times * v

    n_mamba = 2 * cfg.depth_extract + (2 * cfg.depth_swap if cfg.enable_swap else 0)
    add(mamba_block_macs(C, P, K, kc, N), n_mamba)
    if cfg.enable_cross:
        add(cross_block_macs(C, P, K, kc, N), cfg.depth_cross)
    return total


def count_flops(model_or_config, H: int, W: int, flops_per_mac: int = 1) -> int:
    """Analytic FLOPs of one forward pass; one MAC counts as ``flops_per_mac`` FLOPs.

    The default of 1 follows the profiler convention used for published
    parameter/FLOP tables (they report MACs as FLOPs).
    """
    cfg = model_or_config.config if isinstance(model_or_config, PanMambaModel) else model_or_config
    return flops_per_mac * sum(flop_breakdown(cfg, H, W).values())


# -- config serialization ---------------------------------------------------------------
def config_to_text(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# -- checkpoints ------------------------------------------------------------------------
def save_checkpoint(model: PanMambaModel, path) -> None:
    """``PMCK`` | u32 version | u32 len + config text | u32 count | tensors.

    Each tensor: u32 name length, utf-8 name, u32 ndim, u32 dims, f32 payload;
    all integers and floats little-endian.
    """
    cfg = config_to_text(model.config).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode()
        parts.append(struct.pack(f"<I{len(nb)}sI{t.ndim}I", len(nb), nb, t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path) -> PanMambaModel:
    from .config import parse_config_text

    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = rd.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg_text = rd.take(rd.u32()).decode()
    except UnicodeDecodeError as e:
        raise CorruptionError(f"{path}: undecodable config block") from e
    cfg = parse_config_text(cfg_text, NetworkConfig, source=str(path))
    model = build_model(cfg)
    params = dict(model.named_parameters())
    count = rd.u32()
    if count != len(params):
        raise FormatError(f"{path}: {count} tensors, model expects {len(params)}")
    for _ in range(count):
        name = rd.take(rd.u32()).decode(errors="replace")
        ndim = rd.u32()
        dims = rd.u32s(ndim)
        if name not in params:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        t = params[name]
        if dims != t.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {dims}, expected {t.shape}")
        arr = np.frombuffer(rd.take(4 * t.size), dtype="<f4").reshape(t.shape)
        if not np.isfinite(arr).all():
            raise CorruptionError(f"{path}: non-finite values in {name!r}")
        t.data = arr.astype(cfg.dtype)
    if rd.pos != len(rd.buf):
        raise CorruptionError(f"{path}: {len(rd.buf) - rd.pos} trailing bytes")
    return model
