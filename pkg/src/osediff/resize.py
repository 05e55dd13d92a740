"""Separable image resampling used by the degradation pipeline and baselines.

One resampler definition is used everywhere so that "bicubic" means the
same thing in pair synthesis, pre-upsampling, and the bicubic baseline:
Catmull-Rom cubic (a = -0.5) with center-aligned sample grids, edge clamp,
and kernel widening (antialias) when downscaling. ``nearest`` and
``bilinear`` are available for the degradation pipeline's random resizes.
"""

import numpy as np

from .errors import ConfigurationError, DimensionError

RESIZE_MODES = ("nearest", "bilinear", "bicubic")

_CUBIC_A = -0.5


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    x = np.abs(x)
    a = _CUBIC_A
    out = np.zeros_like(x)
    m1 = x <= 1.0
    m2 = (x > 1.0) & (x < 2.0)
    out[m1] = (a + 2.0) * x[m1] ** 3 - (a + 3.0) * x[m1] ** 2 + 1.0
    out[m2] = a * x[m2] ** 3 - 5.0 * a * x[m2] ** 2 + 8.0 * a * x[m2] - 4.0 * a
    return out


def _linear_kernel(x: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(x), 0.0, None)


_KERNELS = {"bicubic": (_cubic_kernel, 2.0), "bilinear": (_linear_kernel, 1.0)}


def _axis_weights(n_in: int, n_out: int, mode: str, antialias: bool) -> np.ndarray:
    """Dense [n_out, n_in] row-stochastic weight matrix for one axis."""
    kernel, support = _KERNELS[mode]
    scale = n_in / n_out
    # Widen the kernel when downscaling so it acts as a low-pass filter.
    width = max(scale, 1.0) if (antialias and scale > 1.0) else 1.0
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.arange(n_in, dtype=np.float64)
    dist = (centers[:, None] - src[None, :]) / width
    w = kernel(dist)
    # Edge clamp: fold weights of out-of-range taps onto border samples via
    # renormalization (all rows keep unit mass).
    radius = support * width
    lo = np.floor(centers - radius)
    hi = np.ceil(centers + radius)
    w[(src[None, :] < lo[:, None] - 1) | (src[None, :] > hi[:, None] + 1)] = 0.0
    row_sum = w.sum(axis=1, keepdims=True)
    row_sum[row_sum == 0.0] = 1.0
    return w / row_sum


def resize(img: np.ndarray, out_h: int, out_w: int, mode: str = "bicubic",
           antialias: bool | None = None) -> np.ndarray:
    """Resize a [C, H, W] (or [H, W]) array; antialias defaults to on for downscaling."""
    if mode not in RESIZE_MODES:
        raise ConfigurationError(f"unknown resize mode {mode!r}; expected one of {RESIZE_MODES}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"invalid output size {out_h}x{out_w}")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected [C, H, W] array, got shape {tuple(img.shape)}")
    _, h, w = arr.shape

    if mode == "nearest":
        rows = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
        cols = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
        out = arr[:, rows][:, :, cols]
    else:
        if antialias is None:
            antialias = True
        wy = _axis_weights(h, out_h, mode, antialias)
        wx = _axis_weights(w, out_w, mode, antialias)
        out = np.einsum("oh,chw,pw->cop", wy, arr, wx, optimize=True)
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def upsample_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic upsample by an integer factor; the pre-upsampling step."""
    _, h, w = img.shape
    return resize(img, h * factor, w * factor, mode="bicubic", antialias=False)


def downsample_bicubic(img: np.ndarray, factor: int) -> np.ndarray:
    """Antialiased bicubic downsample by an integer factor (the reference ``x1/f``)."""
    _, h, w = img.shape
    if h % factor or w % factor:
        raise DimensionError(f"dims {h}x{w} not divisible by scale {factor}")
    return resize(img, h // factor, w // factor, mode="bicubic", antialias=True)
