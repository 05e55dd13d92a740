"""8-bit PNG I/O and the linear mapping between [0, 255] and [-1, 1].

Images are channel-major float32 arrays of shape [3, H, W] with values
in [-1, 1]. PNG is the only supported on-disk format.
"""

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError


def to_unit_range(px: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] -> float32 [3, H, W] in [-1, 1]."""
    arr = px.astype(np.float32) / 255.0 * 2.0 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float [3, H, W] in [-1, 1] -> uint8 [H, W, 3], linear with rounding."""
    arr = np.clip((np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * 255.0, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return to_unit_range(px)


def save_image(path, img: np.ndarray) -> None:
    """Write an image atomically (temp file + rename)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected [3, H, W] image, got shape {tuple(img.shape)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(to_uint8(img), mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def clamp_unit(img: np.ndarray) -> np.ndarray:
    return np.clip(img, -1.0, 1.0)


def luma255(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a [3, H, W] image in [-1, 1], on the 0..255 scale."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected [3, H, W] image, got shape {tuple(img.shape)}")
    x = (np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * 255.0
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
