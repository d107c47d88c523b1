"""Reduced-resolution (Wald) data synthesis, resampling, patching and image I/O.

Images here are plain numpy arrays, channel-first ``(bands, H, W)``.
Conventions:

* blur: separable Gaussian, sigma = r/2, radius ceil(2*sigma), taps normalized
  to sum 1, edge-replicated borders (constants survive exactly);
* decimation keeps samples ``0, r, 2r, ...`` so low-res pixel ``i`` sits on
  high-res pixel ``r*i``;
* bicubic upsampling uses the same origin-aligned grid (``src = dst / r``) with
  a Catmull-Rom kernel and clamped edges.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError, NumericError, UsageError

RAW_MAGIC = b"PMT1"


@dataclass
class ImageTriple:
    pan: np.ndarray  # (1, H, W)
    lrms: np.ndarray  # (S, H/r, W/r)
    gt: np.ndarray | None = None  # (S, H, W)

    @property
    def ratio(self) -> int:
        return self.pan.shape[1] // self.lrms.shape[1]

    def validate(self) -> ImageTriple:
        if self.pan.ndim != 3 or self.pan.shape[0] != 1 or self.lrms.ndim != 3:
            raise DimensionError(f"bad triple shapes pan {self.pan.shape}, lrms {self.lrms.shape}")
        H, W = self.pan.shape[1:]
        h, w = self.lrms.shape[1:]
        if H % h or W % w or H // h != W // w:
            raise DimensionError(f"pan {H}x{W} is not an integer multiple of lrms {h}x{w}")
        if self.gt is not None and self.gt.shape != (self.lrms.shape[0], H, W):
            raise DimensionError(f"gt {self.gt.shape} does not match pan/lrms")
        for name in ("pan", "lrms", "gt"):
            arr = getattr(self, name)
            if arr is not None:
                check_image_values(arr, name)
        return self


def check_image_values(arr: np.ndarray, what: str = "image") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what}: non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError(f"{what}: values outside [0, 1] (min {arr.min():g}, max {arr.max():g})")


# -- resampling -----------------------------------------------------------------
def gaussian_kernel(r: int) -> np.ndarray:
    sigma = r / 2.0
    radius = int(math.ceil(2 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _filter_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    radius = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros(img.shape, dtype=np.float64)
    for j, kj in enumerate(k):
        out += kj * np.take(xp, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, r: int) -> np.ndarray:
    k = gaussian_kernel(r)
    return _filter_axis(_filter_axis(np.asarray(img, dtype=np.float64), k, -2), k, -1)


def blur_decimate(img: np.ndarray, r: int) -> np.ndarray:
    if r == 1:
        return np.asarray(img, dtype=np.float64).copy()
    return gaussian_blur(img, r)[..., ::r, ::r]


def wald_degrade(hrms: np.ndarray, hrpan: np.ndarray, r: int) -> ImageTriple:
    """Build a reduced-resolution training triple; the original MS becomes ground truth.

    ``hrms`` is (S, H, W); ``hrpan`` is the co-registered PAN at the sensor
    ratio, (1, r*H, r*W). The result holds pan (1, H, W), lrms (S, H/r, W/r)
    and gt = hrms.
    """
    hrms = np.asarray(hrms, dtype=np.float64)
    hrpan = np.asarray(hrpan, dtype=np.float64)
    if r < 1:
        raise UsageError(f"ratio must be >= 1, got {r}")
    if hrms.ndim != 3 or hrpan.ndim != 3 or hrpan.shape[0] != 1:
        raise DimensionError(f"expected (S,H,W) MS and (1,rH,rW) PAN, got {hrms.shape}, {hrpan.shape}")
    S, H, W = hrms.shape
    if H % r or W % r:
        raise DimensionError(f"MS size {H}x{W} not divisible by ratio {r}")
    if hrpan.shape[1:] != (r * H, r * W):
        raise DimensionError(f"PAN {hrpan.shape[1:]} must be {r}x the MS size {H}x{W}")
    return ImageTriple(pan=blur_decimate(hrpan, r), lrms=blur_decimate(hrms, r), gt=hrms.copy())


def _cubic_weights(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    s = np.abs(s)
    w = np.zeros_like(s)
    m1 = s <= 1
    m2 = (s > 1) & (s < 2)
    w[m1] = (a + 2) * s[m1] ** 3 - (a + 3) * s[m1] ** 2 + 1
    w[m2] = a * s[m2] ** 3 - 5 * a * s[m2] ** 2 + 8 * a * s[m2] - 4 * a
    return w


def bicubic_matrix(n: int, r: int) -> np.ndarray:
    """(n*r, n) interpolation matrix on the origin-aligned grid, edge-clamped."""
    dst = np.arange(n * r, dtype=np.float64)
    src = dst / r
    base = np.floor(src).astype(int)
    frac = src - base
    M = np.zeros((n * r, n))
    rows = np.arange(n * r)
    for off in (-1, 0, 1, 2):
        idx = np.clip(base + off, 0, n - 1)
        np.add.at(M, (rows, idx), _cubic_weights(frac - off))
    return M


def bicubic_upsample(x: np.ndarray, r: int) -> np.ndarray:
    """Upsample the last two axes by ``r`` with separable Catmull-Rom interpolation."""
    if r < 1:
        raise UsageError(f"ratio must be >= 1, got {r}")
    x = np.asarray(x)
    if r == 1:
        return x.copy()
    h, w = x.shape[-2:]
    Mh = bicubic_matrix(h, r).astype(x.dtype)
    Mw = bicubic_matrix(w, r).astype(x.dtype)
    return Mh @ x @ Mw.T


# -- patches --------------------------------------------------------------------
def extract_patches(triple: ImageTriple, pan_patch: int, stride: int) -> list[ImageTriple]:
    """Co-registered crops: PAN/GT at ``pan_patch``^2, LRMS at ``(pan_patch/r)``^2."""
    r = triple.ratio
    H, W = triple.pan.shape[1:]
    if pan_patch % r or stride % r:
        raise UsageError(f"patch {pan_patch} and stride {stride} must be multiples of ratio {r}")
    if pan_patch > H or pan_patch > W:
        raise UsageError(f"patch {pan_patch} larger than image {H}x{W}")
    if stride < 1:
        raise UsageError("stride must be positive")
    q = pan_patch // r
    out = []
    for y in range(0, H - pan_patch + 1, stride):
        for x in range(0, W - pan_patch + 1, stride):
            ly, lx = y // r, x // r
            out.append(ImageTriple(
                pan=triple.pan[:, y:y + pan_patch, x:x + pan_patch].copy(),
                lrms=triple.lrms[:, ly:ly + q, lx:lx + q].copy(),
                gt=None if triple.gt is None else triple.gt[:, y:y + pan_patch, x:x + pan_patch].copy(),
            ))
    return out


# -- raw tensor files -------------------------------------------------------------
def save_raw(path, arr: np.ndarray) -> None:
    """``PMT1`` | u32 ndim | u32 dims... | f32 payload, all little-endian."""
    arr = np.asarray(arr)
    header = RAW_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_raw(path, check_range: bool = True) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CorruptionError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    if ndim == 0 or ndim > 8 or len(buf) < 8 + 4 * ndim:
        raise FormatError(f"{path}: bad ndim {ndim}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero dimension in {dims}")
    off = 8 + 4 * ndim
    n = int(np.prod(dims))
    if len(buf) - off != 4 * n:
        raise CorruptionError(f"{path}: payload has {len(buf) - off} bytes, expected {4 * n}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
    if not np.isfinite(arr).all():
        raise NumericError(f"{path}: non-finite values")
    if check_range:
        check_image_values(arr, str(path))
    return arr


# -- PNG --------------------------------------------------------------------------
def save_png(path, img: np.ndarray, bits: int = 16) -> None:
    """Write a (1|3|4, H, W) image in [0, 1] as an 8- or 16-bit PNG."""
    import cv2

    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3, 4):
        raise DimensionError(f"PNG export needs 1, 3 or 4 bands, got {img.shape}")
    if bits not in (8, 16):
        raise UsageError(f"PNG bit depth must be 8 or 16, got {bits}")
    check_image_values(img, "png")
    maxv = (1 << bits) - 1
    q = np.rint(img * maxv).astype(np.uint16 if bits == 16 else np.uint8)
    hwc = np.moveaxis(q, 0, -1)
    if hwc.shape[-1] == 3:
        hwc = hwc[..., ::-1]
    elif hwc.shape[-1] == 4:
        hwc = hwc[..., [2, 1, 0, 3]]
    if not cv2.imwrite(str(path), np.ascontiguousarray(hwc)):
        raise FormatError(f"{path}: PNG write failed")


def load_png(path) -> np.ndarray:
    """Read an 8/16-bit PNG into a (bands, H, W) float64 array scaled to [0, 1]."""
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: not a readable PNG")
    if raw.dtype == np.uint8:
        maxv = 255.0
    elif raw.dtype == np.uint16:
        maxv = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        raw = raw[..., None]
    if raw.shape[-1] == 3:
        raw = raw[..., ::-1]
    elif raw.shape[-1] == 4:
        raw = raw[..., [2, 1, 0, 3]]
    elif raw.shape[-1] != 1:
        raise FormatError(f"{path}: unsupported channel count {raw.shape[-1]}")
    return np.moveaxis(raw.astype(np.float64) / maxv, -1, 0).copy()


# -- dataset directories ------------------------------------------------------------
def load_dataset_dir(root, suffix: str = ".raw") -> list[ImageTriple]:
    """Read ``{pan,lrms,gt}/<name>.raw`` triples; gt is optional per sample."""
    root = Path(root)
    pan_dir, lrms_dir, gt_dir = root / "pan", root / "lrms", root / "gt"
    if not pan_dir.is_dir() or not lrms_dir.is_dir():
        raise FormatError(f"{root}: expected pan/ and lrms/ subdirectories")
    names = sorted(p.name for p in pan_dir.glob(f"*{suffix}"))
    if not names:
        raise FormatError(f"{root}: no samples found")
    triples = []
    for name in names:
        if not (lrms_dir / name).exists():
            raise FormatError(f"{root}: lrms/{name} missing")
        gt = load_raw(gt_dir / name) if (gt_dir / name).exists() else None
        triples.append(ImageTriple(load_raw(pan_dir / name), load_raw(lrms_dir / name), gt).validate())
    return triples


def save_triple(root, name: str, triple: ImageTriple) -> None:
    root = Path(root)
    for sub in ("pan", "lrms", "gt"):
        arr = getattr(triple, sub)
        if arr is None:
            continue
        (root / sub).mkdir(parents=True, exist_ok=True)
        save_raw(root / sub / f"{name}.raw", arr)


# -- synthetic scenes -----------------------------------------------------------------
def synthetic_scene(size: int = 64, bands: int = 4, seed: int = 0, n_shapes: int = 10) -> np.ndarray:
    """A (bands, size, size) scene in [0, 1]: a smooth sinusoidal backdrop with
    per-band gains plus sharp-edged discs and boxes of random spectra.

    The hard edges carry detail that bicubic upsampling cannot restore from a
    decimated copy, so a fixture built from it is not solved by the residual base.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gains = rng.uniform(0.4, 1.0, (bands, 1, 1))
    img = gains * (0.15 + 0.25 * (0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.5 * yy))))
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, 1, 2)
        rad = rng.uniform(0.05, 0.2)
        spectrum = rng.uniform(0.05, 0.5, (bands, 1, 1))
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        else:
            mask = (abs(yy - cy) < rad) & (abs(xx - cx) < 0.6 * rad)
        img = np.where(mask, spectrum + 0.3 * img, img)
    return np.clip(img, 0.0, 1.0)


def synthetic_triple(size: int = 64, bands: int = 4, ratio: int = 4, seed: int = 0) -> ImageTriple:
    """Training pair at ``size`` with the scene itself as ground truth.

    PAN is the band mean of the scene; LRMS is its blurred, decimated copy.
    """
    gt = synthetic_scene(size, bands, seed)
    return ImageTriple(pan=gt.mean(axis=0, keepdims=True), lrms=blur_decimate(gt, ratio), gt=gt).validate()
