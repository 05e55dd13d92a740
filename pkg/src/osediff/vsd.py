"""Latent-space variational score distillation.

Two pieces: the distillation gradient for the generator (difference of
the frozen and finetuned regularizers' one-step-denoised predictions on
the noised student latent, normalized per batch) and the diffusion loss
that keeps the finetuned regularizer tracking the student's output
distribution. Both regularizer predictions are computed under
stop-gradient; the gradient reaches the generator only through a
surrogate inner product against the student latent.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import Denoiser, cfg_predict, predict_noise
from .errors import RangeError
from .schedule import NoiseSchedule, forward_diffuse, one_step_denoise

WEIGHTING_MODES = ("dmd", "classic")
OMEGA_NORMS = ("l1", "l2")


@dataclass
class RegularizerPrediction:
    """Stop-gradient byproducts of one distillation-gradient evaluation."""

    t: int
    omega: float
    skipped: bool
    z_phi: torch.Tensor
    z_phi_prime: torch.Tensor
    eps_phi_cfg: torch.Tensor
    eps_phi_prime: torch.Tensor
    z_noised: torch.Tensor
    eps: torch.Tensor
    grad: torch.Tensor
    loss_value: float


def default_vsd_t_range(schedule: NoiseSchedule) -> tuple[int, int]:
    """Timestep window for the distillation gradient: the middle 96% of the
    schedule (20..980 at T=1000), scaled with T."""
    t = schedule.timesteps
    lo = max(1, int(np.floor(0.02 * t)))
    hi = min(t, int(np.floor(0.98 * t)))
    return lo, hi


def vsd_gradient_terms(z_hat_h: torch.Tensor, c, phi: Denoiser, phi_prime: Denoiser,
                       schedule: NoiseSchedule, t: int, eps: torch.Tensor,
                       cfg_scale: float, c_neg, cfg_on_finetuned: bool = False,
                       weighting: str = "dmd", omega_norm: str = "l1"
                       ) -> RegularizerPrediction:
    """Evaluate both regularizers on the noised student latent at a fixed
    (t, eps) and form the weighted gradient. Everything runs under no_grad
    and in float64, so the score-difference identity holds tightly."""
    if weighting not in WEIGHTING_MODES:
        raise RangeError(f"unknown vsd weighting {weighting!r}")
    if omega_norm not in OMEGA_NORMS:
        raise RangeError(f"unknown omega norm {omega_norm!r}")
    with torch.no_grad():
        z64 = z_hat_h.detach().double()
        zt64 = forward_diffuse(z64, t, eps.double(), schedule)
        zt_in = zt64.to(z_hat_h.dtype)
        eps_cfg = cfg_predict(zt_in, t, c, c_neg, cfg_scale, phi, schedule).double()
        if cfg_on_finetuned:
            eps_ft = cfg_predict(zt_in, t, c, c_neg, cfg_scale, phi_prime, schedule).double()
        else:
            eps_ft = predict_noise(zt_in, t, c, phi_prime, schedule).double()
        z_phi = one_step_denoise(zt64, eps_cfg, t, schedule)
        z_phi_prime = one_step_denoise(zt64, eps_ft, t, schedule)

        if omega_norm == "l1":
            dev = float(torch.mean(torch.abs(z_phi - z64)))
        else:
            dev = float(torch.sqrt(torch.mean((z_phi - z64) ** 2)))
        if weighting == "classic":
            _, b = schedule.coeffs(t)
            omega = b * b
            grad64 = omega * (eps_cfg - eps_ft)
            skipped = False
        elif dev == 0.0:
            omega = 0.0
            grad64 = torch.zeros_like(z64)
            skipped = True
        else:
            omega = 1.0 / dev
            grad64 = omega * (z_phi_prime - z_phi)
            skipped = False
    grad = grad64.to(z_hat_h.dtype)
    return RegularizerPrediction(
        t=t, omega=omega, skipped=skipped, z_phi=z_phi, z_phi_prime=z_phi_prime,
        eps_phi_cfg=eps_cfg, eps_phi_prime=eps_ft, z_noised=zt64, eps=eps.detach(),
        grad=grad, loss_value=0.5 * float(torch.sum(grad**2)))


def reg_gradient(z_hat_h: torch.Tensor, c, phi: Denoiser, phi_prime: Denoiser,
                 schedule: NoiseSchedule, rng: np.random.Generator, cfg_scale: float,
                 c_neg, t_range: tuple[int, int] | None = None,
                 cfg_on_finetuned: bool = False, weighting: str = "dmd",
                 omega_norm: str = "l1") -> tuple[torch.Tensor, RegularizerPrediction]:
    """Single-sample distillation gradient, delivered through a surrogate.

    The returned scalar backpropagates exactly ``grad`` onto z_hat_H and
    nothing onto either regularizer; a degenerate batch (frozen
    regularizer already agrees with the student) yields a zero surrogate
    and a ``skipped`` record.
    """
    lo, hi = t_range or default_vsd_t_range(schedule)
    if not 1 <= lo <= hi <= schedule.timesteps:
        raise RangeError(f"vsd timestep range [{lo}, {hi}] outside schedule")
    t = int(rng.integers(lo, hi + 1))
    eps = torch.from_numpy(
        rng.standard_normal(tuple(z_hat_h.shape)).astype(np.float32)
    ).to(device=z_hat_h.device, dtype=z_hat_h.dtype)
    record = vsd_gradient_terms(z_hat_h, c, phi, phi_prime, schedule, t, eps, cfg_scale,
                                c_neg, cfg_on_finetuned, weighting, omega_norm)
    if record.skipped:
        return z_hat_h.new_zeros(()), record
    surrogate = torch.sum(record.grad * z_hat_h)
    return surrogate, record


def regularizer_loss(z_hat_h: torch.Tensor, c, phi_prime: Denoiser,
                     schedule: NoiseSchedule, rng: np.random.Generator,
                     t_range: tuple[int, int] | None = None
                     ) -> tuple[torch.Tensor, int]:
    """Diffusion loss for the finetuned regularizer on the (detached)
    student latent: MSE between its noise prediction and the true noise.
    Gradient flows only into phi-prime's trainable parameters."""
    lo, hi = t_range or (1, schedule.timesteps)
    if not 1 <= lo <= hi <= schedule.timesteps:
        raise RangeError(f"regularizer timestep range [{lo}, {hi}] outside schedule")
    t = int(rng.integers(lo, hi + 1))
    z = z_hat_h.detach()
    eps = torch.from_numpy(
        rng.standard_normal(tuple(z.shape)).astype(np.float32)
    ).to(device=z.device, dtype=z.dtype)
    z_t = forward_diffuse(z, t, eps, schedule)
    pred = predict_noise(z_t, t, c, phi_prime, schedule)
    return torch.mean((pred - eps) ** 2), t
