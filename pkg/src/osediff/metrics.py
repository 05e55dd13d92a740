"""Evaluation metrics: luma PSNR, luma SSIM, and a small Frechet distance.

PSNR and SSIM follow the usual Y-channel convention on the 0..255 scale.
The Frechet distance compares Gaussian fits of feature sets; features for
corpus-level scoring come from the frozen toy-VAE encoder (per-channel
mean and standard deviation of the latents), standing in for a pretrained
feature network.
"""

import numpy as np
from scipy import linalg

from .errors import DimensionError, RangeError
from .images import luma255

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio on the luma channel, capped at 99 dB."""
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((luma255(a) - luma255(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0**2 / mse))


def _gaussian_window(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.apply_along_axis(lambda r: np.convolve(r, w, mode="valid"), 0, img)
    return np.apply_along_axis(lambda r: np.convolve(r, w, mode="valid"), 1, out)


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM on the luma channel with a Gaussian window."""
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    x, y = luma255(a), luma255(b)
    if min(x.shape) < window:
        raise DimensionError(f"image {x.shape} smaller than ssim window {window}")
    w = _gaussian_window(window, sigma)
    c1 = (SSIM_K1 * 255.0) ** 2
    c2 = (SSIM_K2 * 255.0) ** 2
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    xx = _filter_valid(x * x, w) - mu_x**2
    yy = _filter_valid(y * y, w) - mu_y**2
    xy = _filter_valid(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


_EIG_FLOOR = 1e-8


def _floored(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, _EIG_FLOOR)) @ vecs.T


def toy_frechet(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets [N, D]."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise RangeError(f"need at least dim+1={dim + 1} samples per set, "
                         f"got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = _floored(np.cov(a, rowvar=False).reshape(dim, dim))
    cov_b = _floored(np.cov(b, rowvar=False).reshape(dim, dim))
    # tr((Sa^1/2 Sb Sa^1/2)^1/2) is the symmetric, real-valued form of
    # tr((Sa Sb)^1/2).
    root_a = linalg.sqrtm(cov_a).real
    inner_vals = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    cross = np.sqrt(np.maximum(inner_vals, 0.0)).sum()
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d2, 0.0)


def pooled_encoder_features(vae, images: np.ndarray) -> np.ndarray:
    """Frozen-encoder features for corpus scoring: per-channel latent mean
    and standard deviation, [N, 2 * latent_channels]."""
    from .vae import encode_images

    lat = encode_images(vae, np.asarray(images, dtype=np.float32))
    return np.concatenate([lat.mean(axis=(2, 3)), lat.std(axis=(2, 3))], axis=1)


def metric_report(pred_images, ref_images, names=None, vae=None) -> dict:
    """Per-image PSNR/SSIM plus corpus toy-Frechet (when a featurizer is given)."""
    if len(pred_images) != len(ref_images):
        raise DimensionError(
            f"corpus sizes differ: {len(pred_images)} pred vs {len(ref_images)} ref")
    names = names or [f"{i:04d}" for i in range(len(pred_images))]
    per_image = []
    for name, p, r in zip(names, pred_images, ref_images):
        per_image.append({"name": name, "psnr": psnr(p, r), "ssim": ssim(p, r)})
    report = {
        "count": len(per_image),
        "psnr_mean": float(np.mean([m["psnr"] for m in per_image])) if per_image else None,
        "ssim_mean": float(np.mean([m["ssim"] for m in per_image])) if per_image else None,
        "toy_frechet": None,
        "per_image": per_image,
    }
    if vae is not None and per_image:
        report["toy_frechet"] = toy_frechet(pooled_encoder_features(vae, pred_images),
                                            pooled_encoder_features(vae, ref_images))
    return report
