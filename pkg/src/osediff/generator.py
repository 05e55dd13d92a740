"""The one-step student: prompt extraction, encoding, single-step latent
mapping at the final timestep, decoding.

``restore`` performs the whole LQ-to-HQ synthesis with exactly one
denoiser evaluation and no randomness anywhere on the path; the
``forward_calls`` counter on the denoiser lets tests audit that claim.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import Denoiser, predict_noise
from .errors import DimensionError
from .lora import AdapterSet
from .prompts import TagEmbedder
from .schedule import NoiseSchedule, one_step_denoise
from .vae import ToyVAE


@dataclass
class GeneratorBundle:
    """Everything the student needs at inference: adapted VAE encoder,
    adapted denoiser, frozen decoder (inside vae), schedule, prompt path."""

    vae: ToyVAE
    denoiser: Denoiser
    schedule: NoiseSchedule
    extractor: object
    embedder: TagEmbedder
    adapters: AdapterSet | None = None


def extract_prompt(x_l: np.ndarray, extractor, embedder: TagEmbedder) -> np.ndarray:
    """c_y for one image: [tokens, dim]."""
    return extractor.extract(x_l, embedder)


def latent_map(z_l: torch.Tensor, c, bundle: GeneratorBundle) -> torch.Tensor:
    """One-step denoising of the LQ latent at the final timestep.

    No noise is added to z_L; the prediction happens at t = T and the
    clean latent follows from the schedule's single-step inverse.
    """
    t_final = bundle.schedule.timesteps
    eps_hat = predict_noise(z_l, t_final, c, bundle.denoiser, bundle.schedule)
    return one_step_denoise(z_l, eps_hat, t_final, bundle.schedule)


def forward_train(bundle: GeneratorBundle, x_l_batch: np.ndarray):
    """Differentiable restore path for a numpy batch.

    Returns (context, z_L, z_hat_H, x_hat_H); gradients flow into the
    adapter parameters through the encoder and denoiser.
    """
    from .prompts import embed_batch

    param = next(bundle.vae.parameters())
    dtype, device = param.dtype, param.device
    tags = [bundle.extractor.tags(img) for img in x_l_batch]
    ctx = torch.from_numpy(embed_batch(bundle.embedder, tags)).to(device=device, dtype=dtype)
    x = torch.from_numpy(np.asarray(x_l_batch, dtype=np.float32)).to(device=device,
                                                                     dtype=dtype)
    z_l = bundle.vae.encode(x)
    z_hat = latent_map(z_l, ctx, bundle)
    x_hat = bundle.vae.decode(z_hat)
    return ctx, z_l, z_hat, x_hat


def restore(x_l: np.ndarray, bundle: GeneratorBundle) -> np.ndarray:
    """Deterministic LQ-to-HQ synthesis for one [3, H, W] image."""
    if x_l.ndim != 3 or x_l.shape[0] != 3:
        raise DimensionError(f"expected a [3, H, W] image, got {tuple(x_l.shape)}")
    with torch.no_grad():
        _, _, _, x_hat = forward_train(bundle, x_l[None])
    return x_hat[0].float().cpu().numpy()


def restore_many(images, bundle: GeneratorBundle) -> np.ndarray:
    return np.stack([restore(img, bundle) for img in images])
