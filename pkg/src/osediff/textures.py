"""Procedural texture corpus: the built-in HQ image source.

Five labeled classes with deliberately separable luma statistics so the
tag-based prompt path has ground truth to work against:

* stripes  - oriented sinusoidal bands (strongly anisotropic spectrum)
* checker  - hard square tiling (peaky, axis-balanced spectrum)
* blobs    - a few smooth Gaussian bumps (low-frequency, isotropic)
* gradient - near-planar ramp (almost all energy in a linear fit)
* noise    - lightly smoothed white noise (broadband high frequency)
"""

import numpy as np

TEXTURE_CLASSES = ("stripes", "checker", "blobs", "gradient", "noise")


def _coords(size: int):
    ax = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")


def _stripes(rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = _coords(size)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    sharp = rng.uniform(1.0, 3.0)
    return np.tanh(sharp * wave) / np.tanh(sharp)


def _checker(rng: np.random.Generator, size: int) -> np.ndarray:
    cell = int(rng.choice([4, 8]))
    oy, ox = rng.integers(0, cell, size=2)
    y = (np.arange(size) + oy) // cell
    x = (np.arange(size) + ox) // cell
    return np.where((y[:, None] + x[None, :]) % 2 == 0, 1.0, -1.0)


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = _coords(size)
    field = np.zeros((size, size))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        sigma = rng.uniform(0.10, 0.25)
        sign = rng.choice([-1.0, 1.0])
        field += sign * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma**2))
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = _coords(size)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (x - 0.5) * np.cos(theta) + (y - 0.5) * np.sin(theta)
    curve = rng.uniform(-0.15, 0.15) * (x - 0.5) * (y - 0.5)
    field = ramp + curve
    return field / (np.abs(field).max() + 1e-12)


def _noise(rng: np.random.Generator, size: int) -> np.ndarray:
    field = rng.standard_normal((size, size))
    # One binomial smoothing pass keeps it broadband but not pure salt.
    k = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        field = (np.take(field, np.clip(np.arange(size) - 1, 0, size - 1), axis=axis) * k[0]
                 + field * k[1]
                 + np.take(field, np.clip(np.arange(size) + 1, 0, size - 1), axis=axis) * k[2])
    return field / (np.abs(field).max() + 1e-12)


_GENERATORS = {
    "stripes": _stripes,
    "checker": _checker,
    "blobs": _blobs,
    "gradient": _gradient,
    "noise": _noise,
}


def make_texture(class_name: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one [3, size, size] float32 image in [-1, 1] of the given class."""
    field = _GENERATORS[class_name](rng, size)
    amp = rng.uniform(0.45, 0.85)
    base = rng.uniform(-0.25, 0.25, size=3)
    # Color direction with a guaranteed luma component so Y-channel
    # statistics carry the class signature.
    direction = rng.uniform(0.4, 1.0, size=3) * rng.choice([-1.0, 1.0])
    img = base[:, None, None] + amp * direction[:, None, None] * field[None]
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def sample_texture(rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, str]:
    name = TEXTURE_CLASSES[rng.integers(0, len(TEXTURE_CLASSES))]
    return make_texture(name, rng, size), name
