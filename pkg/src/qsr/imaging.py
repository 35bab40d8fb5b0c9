"""Image I/O, bicubic resampling, patch sampling and quality metrics.

Images are float32 arrays in HWC layout with values in [0, 1]; they are
clamped on load and before any metric. PSNR and SSIM follow the SR benchmark
convention: computed on the 8-bit-domain luma channel after shaving a
scale-sized border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PNG I/O


def load_png(path):
    """8- or 16-bit PNG -> float32 HWC RGB in [0, 1]. Grayscale is expanded
    to three channels; an alpha channel is dropped."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageError(f"cannot read PNG {path}: {e}") from e
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def save_png(img, path):
    arr = np.clip(np.asarray(img, np.float32), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# bicubic resampling (cubic convolution, a = -0.5, symmetric edge reflection,
# kernel widened by 1/scale when downscaling)


def _cubic(x):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(
        ax <= 1,
        1.5 * ax3 - 2.5 * ax2 + 1.0,
        np.where(ax < 2, -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0, 0.0),
    )


def _reflect(idx, n):
    idx = np.asarray(idx)
    while True:
        neg = idx < 0
        over = idx > n - 1
        if not (neg.any() or over.any()):
            return idx
        idx = np.where(neg, -idx - 1, idx)
        idx = np.where(over, 2 * n - idx - 1, idx)


def _resize_axis_plan(in_size, out_size):
    scale = out_size / in_size
    width = 1.0 if scale >= 1 else scale  # antialias stretch on downscale
    support = 4.0 / width
    u = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(u - support / 2).astype(np.int64) + 1
    taps = int(np.ceil(support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = _cubic((u[:, None] - idx) * width) * width
    w = w / w.sum(axis=1, keepdims=True)
    return _reflect(idx, in_size), w.astype(np.float64)


def bicubic_resize(img, scale):
    """Resample HWC (or HW) image by a scale factor > 0."""
    if scale <= 0:
        raise ValueError(f"bicubic_resize: scale must be positive, got {scale}")
    img = np.asarray(img, np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise ValueError(f"bicubic_resize: output {oh}x{ow} smaller than one pixel")
    idx, wt = _resize_axis_plan(h, oh)
    img = np.einsum("ot,othc->ohc", wt, img[idx, :, :])
    idx, wt = _resize_axis_plan(w, ow)
    img = np.einsum("ot,hotc->hoc", wt, img[:, idx, :])
    out = img[:, :, 0] if squeeze else img
    return out.astype(np.float32)


def modcrop(img, scale):
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


# ---------------------------------------------------------------------------
# patches and augmentation


@dataclass
class PatchPair:
    lr: np.ndarray  # (p, p, 3)
    hr: np.ndarray  # (s*p, s*p, 3)


def sample_patch(hr_img, scale, patch, rng, lr_img=None) -> PatchPair:
    """Aligned LR/HR crop; patch is the LR side length. The LR image is
    generated bicubically when not supplied."""
    hr_img = modcrop(hr_img, scale)
    if lr_img is None:
        lr_img = bicubic_resize(hr_img, 1.0 / scale)
    lh, lw = lr_img.shape[:2]
    if lh < patch or lw < patch:
        raise ValueError(
            f"sample_patch: LR image {lh}x{lw} smaller than patch {patch}"
        )
    y0 = int(rng.integers(0, lh - patch + 1))
    x0 = int(rng.integers(0, lw - patch + 1))
    lr = lr_img[y0 : y0 + patch, x0 : x0 + patch]
    s = scale
    hr = hr_img[s * y0 : s * (y0 + patch), s * x0 : s * (x0 + patch)]
    return PatchPair(lr=np.ascontiguousarray(lr), hr=np.ascontiguousarray(hr))


def augment(pair: PatchPair, rng) -> PatchPair:
    """Uniform draw over {0, 90, 180, 270 degrees} x {flip, no flip}, applied
    identically to both patches. Pure index permutations, no interpolation."""
    k = int(rng.integers(0, 4))
    f = int(rng.integers(0, 2))

    def t(img):
        img = np.rot90(img, k, axes=(0, 1))
        if f:
            img = np.flip(img, axis=1)
        return np.ascontiguousarray(img)

    return PatchPair(lr=t(pair.lr), hr=t(pair.hr))


# ---------------------------------------------------------------------------
# metrics (Y channel, 8-bit domain)


def y_channel(img):
    """BT.601 8-bit-domain luma in [16, 235] from RGB in [0, 1]."""
    img = np.clip(np.asarray(img, np.float64), 0.0, 1.0)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return 16.0 + 65.481 * r + 128.553 * g + 24.966 * b


def _shaved_y(a, b, shave):
    if a.shape != b.shape:
        raise ValueError(f"metric: shape mismatch {a.shape} vs {b.shape}")
    ya, yb = y_channel(a), y_channel(b)
    if shave > 0:
        if ya.shape[0] <= 2 * shave or ya.shape[1] <= 2 * shave:
            raise ValueError(f"metric: image {ya.shape} too small to shave {shave}")
        ya = ya[shave:-shave, shave:-shave]
        yb = yb[shave:-shave, shave:-shave]
    return ya, yb


PSNR_CAP = 100.0


def psnr(a, b, shave=0):
    ya, yb = _shaved_y(a, b, shave)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP)


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _gauss_filter(img, win):
    """Separable valid-mode filtering with a 1-D window."""
    k = win.size
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ win
    return np.lib.stride_tricks.sliding_window_view(v, k, axis=1) @ win


def ssim(a, b, shave=0):
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) on the Y channel."""
    ya, yb = _shaved_y(a, b, shave)
    win = _gauss_window()
    if ya.shape[0] < win.size or ya.shape[1] < win.size:
        raise ValueError(f"ssim: shaved image {ya.shape} smaller than the 11x11 window")
    c1, c2 = (0.01 * 255.0) ** 2, (0.03 * 255.0) ** 2
    mu1, mu2 = _gauss_filter(ya, win), _gauss_filter(yb, win)
    s11 = _gauss_filter(ya * ya, win) - mu1 * mu1
    s22 = _gauss_filter(yb * yb, win) - mu2 * mu2
    s12 = _gauss_filter(ya * yb, win) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))
