"""Fusion quality metrics on (bands, H, W) arrays with values in [0, 1].

Reference metrics: PSNR, SSIM, SAM (radians), ERGAS.
No-reference metrics: D_lambda, D_s and QNR built on the universal image
quality index Q computed over sliding square blocks.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import blur_decimate
from .errors import DimensionError, NumericError, UsageError

PSNR_CAP = 99.0
Q_BLOCK = 32


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return pred, gt


def psnr(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ w


def ssim(pred, gt, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all valid Gaussian windows, averaged over bands."""
    pred, gt = _pair(pred, gt)
    if pred.shape[-1] < window or pred.shape[-2] < window:
        raise UsageError(f"image {pred.shape[-2:]} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx = _filter_valid(pred, w)
    my = _filter_valid(gt, w)
    sxx = _filter_valid(pred * pred, w) - mx * mx
    syy = _filter_valid(gt * gt, w) - my * my
    sxy = _filter_valid(pred * gt, w) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean(axis=(-2, -1)).mean())


def sam(pred, gt) -> float:
    """Mean spectral angle in radians; pixels where either vector is zero are skipped."""
    pred, gt = _pair(pred, gt)
    na = np.sqrt((pred * pred).sum(axis=0))
    nb = np.sqrt((gt * gt).sum(axis=0))
    valid = (na > 0) & (nb > 0)
    if not valid.any():
        return 0.0
    # half-angle form; arccos of the cosine loses ~1e-8 rad near zero angle
    ua = pred[:, valid] / na[valid]
    ub = gt[:, valid] / nb[valid]
    ang = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=0), np.linalg.norm(ua + ub, axis=0))
    return float(ang.mean())


def ergas(pred, gt, ratio: int = 4) -> float:
    pred, gt = _pair(pred, gt)
    mu = gt.mean(axis=(1, 2))
    if np.any(mu == 0):
        raise NumericError(f"ERGAS undefined: zero mean in band(s) {np.flatnonzero(mu == 0).tolist()}")
    rmse = np.sqrt(((pred - gt) ** 2).mean(axis=(1, 2)))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / mu) ** 2)))


def _box_sums(img: np.ndarray, b: int) -> np.ndarray:
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(0).cumsum(1)
    return c[b:, b:] - c[:-b, b:] - c[b:, :-b] + c[:-b, :-b]


def q_index(x, y, block: int = Q_BLOCK) -> float:
    """Universal image quality index averaged over sliding ``block``x``block`` windows.

    The block is clipped to the image size. Degenerate windows follow the usual
    conventions: flat-and-equal windows score 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionError(f"q_index needs equal 2-D inputs, got {x.shape} and {y.shape}")
    b = min(block, *x.shape)
    n = b * b
    mx = _box_sums(x, b) / n
    my = _box_sums(y, b) / n
    vx = _box_sums(x * x, b) / n - mx * mx
    vy = _box_sums(y * y, b) / n - my * my
    cxy = _box_sums(x * y, b) / n - mx * my
    mm = mx * mx + my * my
    vv = vx + vy
    q = np.ones_like(mx)
    both = (mm > 0) & (vv > 0)
    q[both] = 4 * cxy[both] * mx[both] * my[both] / (vv[both] * mm[both])
    only_m = (mm > 0) & (vv <= 0)
    q[only_m] = 2 * mx[only_m] * my[only_m] / mm[only_m]
    only_v = (mm <= 0) & (vv > 0)
    q[only_v] = 2 * cxy[only_v] / vv[only_v]
    return float(q.mean())


def d_lambda(fused, lrms, block: int = Q_BLOCK, p: int = 1) -> float:
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    S = fused.shape[0]
    if S < 2:
        return 0.0
    diffs = [abs(q_index(fused[i], fused[j], block) - q_index(lrms[i], lrms[j], block)) ** p
             for i, j in itertools.permutations(range(S), 2)]
    return float(np.mean(diffs) ** (1.0 / p))


def d_s(fused, lrms, pan, ratio: int, block: int = Q_BLOCK, q: int = 1) -> float:
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    pan = np.asarray(pan, dtype=np.float64).reshape(fused.shape[-2:])
    pan_lr = blur_decimate(pan, ratio)
    diffs = [abs(q_index(fused[b], pan, block) - q_index(lrms[b], pan_lr, block)) ** q
             for b in range(fused.shape[0])]
    return float(np.mean(diffs) ** (1.0 / q))


def qnr(fused, lrms, pan, ratio: int = 4, block: int = Q_BLOCK) -> tuple[float, float, float]:
    """``(D_lambda, D_s, QNR)`` with exponents p = q = 1."""
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    pan = np.asarray(pan, dtype=np.float64)
    S, H, W = fused.shape
    if lrms.shape != (S, H // ratio, W // ratio) or H % ratio or W % ratio:
        raise DimensionError(f"fused {fused.shape} and lrms {lrms.shape} inconsistent with ratio {ratio}")
    if pan.reshape(-1).size != H * W:
        raise DimensionError(f"pan {pan.shape} does not match fused {fused.shape}")
    dl = d_lambda(fused, lrms, block)
    ds = d_s(fused, lrms, pan, ratio, block)
    return dl, ds, qnr_from(dl, ds)


def qnr_from(dl: float, ds: float) -> float:
    return (1.0 - dl) * (1.0 - ds)


@dataclass
class MetricsReport:
    psnr: float | None = None
    ssim: float | None = None
    sam: float | None = None
    ergas: float | None = None
    d_lambda: float | None = None
    d_s: float | None = None
    qnr: float | None = None

    def items(self):
        return [(k, v) for k, v in asdict(self).items() if v is not None]

    def to_kv(self) -> str:
        return "".join(f"{k}={v:.10g}\n" for k, v in self.items())

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(self)]
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(names)
        w.writerow(["" if getattr(self, n) is None else f"{getattr(self, n):.10g}" for n in names])
        return buf.getvalue()


def reduced_resolution_report(pred, gt, ratio: int = 4) -> MetricsReport:
    return MetricsReport(psnr=psnr(pred, gt), ssim=ssim(pred, gt), sam=sam(pred, gt),
                         ergas=ergas(pred, gt, ratio))


def full_resolution_report(fused, lrms, pan, ratio: int = 4) -> MetricsReport:
    dl, ds, q = qnr(fused, lrms, pan, ratio)
    return MetricsReport(d_lambda=dl, d_s=ds, qnr=q)
