"""Variance-preserving diffusion noise schedule and its two core identities.

The schedule stores per-timestep signal/noise coefficients (alpha_t, beta_t)
with alpha_t^2 + beta_t^2 = 1. Timesteps are 1-indexed: t in {1, ..., T}.

The two operations here are the algebraic primitives everything else is
built from: noising a latent (forward_diffuse) and recovering the clean
latent from a noise prediction in a single step (one_step_denoise).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, RangeError

SCHEDULE_KINDS = ("linear-variance", "cosine")

# Standard DDPM ramp for per-step variances under the linear-variance kind.
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

_COSINE_OFFSET = 0.008
_MAX_STEP_VARIANCE = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients of the variance-preserving forward process.

    alpha and beta are float64 arrays of length ``timesteps``; entry i
    corresponds to timestep t = i + 1.
    """

    timesteps: int
    alpha: np.ndarray
    beta: np.ndarray

    def coeffs(self, t: int) -> tuple[float, float]:
        """Return (alpha_t, beta_t) for a 1-indexed timestep."""
        if not 1 <= int(t) <= self.timesteps:
            raise RangeError(f"timestep {t} outside schedule range [1, {self.timesteps}]")
        return float(self.alpha[int(t) - 1]), float(self.beta[int(t) - 1])

    def coeff_arrays(self, t):
        """Vectorized coeffs for an integer array of timesteps."""
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.timesteps):
            raise RangeError(f"timesteps {t} outside schedule range [1, {self.timesteps}]")
        return self.alpha[t - 1], self.beta[t - 1]


def make_schedule(timesteps: int, kind: str = "linear-variance",
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Build a variance-preserving schedule of the given kind.

    ``linear-variance`` ramps the per-step variance linearly from
    beta_start to beta_end; ``cosine`` uses the squared-cosine cumulative
    signal curve with per-step variances clipped to keep alpha_t > 0.
    In both cases alpha_t is the square root of the cumulative
    signal-retention product and beta_t = sqrt(1 - alpha_t^2).
    """
    if timesteps < 2:
        raise ConfigurationError(f"schedule needs at least 2 timesteps, got {timesteps}")
    if kind == "linear-variance":
        if not 0.0 < beta_start < beta_end < 1.0:
            raise ConfigurationError(
                f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
        step_var = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    elif kind == "cosine":
        u = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        f = np.cos((u + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET) * np.pi / 2.0) ** 2
        retained = f / f[0]
        step_var = np.clip(1.0 - retained[1:] / retained[:-1], 0.0, _MAX_STEP_VARIANCE)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    signal = np.cumprod(1.0 - step_var)
    alpha = np.sqrt(signal)
    beta = np.sqrt(1.0 - signal)
    return NoiseSchedule(timesteps=timesteps, alpha=alpha, beta=beta)


def _check_shapes(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z, t: int, eps, schedule: NoiseSchedule):
    """Noise a latent: alpha_t * z + beta_t * eps.

    Works elementwise on numpy arrays or torch tensors; dtype follows
    the inputs.
    """
    _check_shapes(z, eps, "forward_diffuse")
    a, b = schedule.coeffs(t)
    return a * z + b * eps


def one_step_denoise(z_t, eps_hat, t: int, schedule: NoiseSchedule):
    """Recover the clean latent from a noise prediction: (z_t - beta_t * eps_hat) / alpha_t."""
    _check_shapes(z_t, eps_hat, "one_step_denoise")
    a, b = schedule.coeffs(t)
    return (z_t - b * eps_hat) / a
