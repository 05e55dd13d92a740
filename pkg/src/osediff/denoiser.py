"""Conditional noise-prediction UNet and its three roles.

One architecture is instantiated three times: the frozen teacher, the
LoRA-adapted student, and the LoRA-adapted finetuned regularizer. They
share bit-identical base weights after teacher pretraining; only the
adapters differ. Classifier-free guidance lives here too, and is applied
only where the training scheme calls for it (the frozen-regularizer
prediction).
"""

import numpy as np
import torch
from torch import nn

from .errors import DataError, DimensionError, RangeError, TrainingFailureError
from .nets import CrossAttention, ResBlock, _norm, sinusoidal_embedding
from .schedule import NoiseSchedule, one_step_denoise

# Negative prompt used for guidance, straight from the training recipe.
NEGATIVE_PROMPT = ("painting, oil painting, illustration, drawing, art, sketch, oil painting, "
                   "cartoon, CG Style, 3D render, unreal engine, blurring, dirty, messy, "
                   "worst quality, low quality, frames, watermark, signature, jpeg artifacts, "
                   "deformed, lowres, over-smooth")
DEFAULT_CFG_SCALE = 7.5


class Denoiser(nn.Module):
    """Two-level UNet with timestep embedding and cross-attention conditioning.

    ``forward_calls`` counts evaluations; the generator's single-step
    audit reads it.
    """

    def __init__(self, latent_channels: int = 4, width: int = 64, mult=(1, 2),
                 temb_dim: int = 128, text_dim: int = 32, heads: int = 2):
        super().__init__()
        w0, w1 = width * mult[0], width * mult[1]
        self.temb_dim = temb_dim
        self.temb_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(),
                                      nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, w0, 3, padding=1)
        self.down_block = ResBlock(w0, w0, temb_dim)
        self.down_attn = CrossAttention(w0, text_dim, heads)
        self.downsample = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.mid_block1 = ResBlock(w1, w1, temb_dim)
        self.mid_attn = CrossAttention(w1, text_dim, heads)
        self.mid_block2 = ResBlock(w1, w1, temb_dim)
        self.up_conv = nn.Conv2d(w1, w0, 3, padding=1)
        self.up_block = ResBlock(w0 + w0, w0, temb_dim)
        self.up_attn = CrossAttention(w0, text_dim, heads)
        self.norm_out = _norm(w0)
        self.conv_out = nn.Conv2d(w0, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.act = nn.SiLU()
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.forward_calls = 0

    def forward(self, z_t: torch.Tensor, t, context: torch.Tensor) -> torch.Tensor:
        self.forward_calls += 1
        if isinstance(t, int):
            t = torch.full((z_t.shape[0],), t, dtype=torch.long, device=z_t.device)
        temb = self.temb_mlp(sinusoidal_embedding(t, self.temb_dim).to(z_t.dtype))
        h0 = self.conv_in(z_t)
        h0 = self.down_attn(self.down_block(h0, temb), context)
        h1 = self.downsample(h0)
        h1 = self.mid_attn(self.mid_block1(h1, temb), context)
        h1 = self.mid_block2(h1, temb)
        u = self.up_conv(self.upsample(h1))
        u = self.up_attn(self.up_block(torch.cat([u, h0], dim=1), temb), context)
        return self.conv_out(self.act(self.norm_out(u)))


def _as_context(c, batch: int, dtype=torch.float32) -> torch.Tensor:
    """Promote a [L, D] or [B, L, D] embedding (numpy or tensor) to a batch tensor."""
    t = torch.as_tensor(np.asarray(c, dtype=np.float32) if isinstance(c, np.ndarray) else c)
    t = t.to(dtype)
    if t.ndim == 2:
        t = t[None].expand(batch, -1, -1)
    if t.ndim != 3 or t.shape[0] != batch:
        raise DimensionError(f"prompt embedding shape {tuple(t.shape)} does not fit batch {batch}")
    return t


def predict_noise(z_t: torch.Tensor, t: int, c, model: Denoiser,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Single conditional noise prediction with contract checks."""
    if not 1 <= int(t) <= schedule.timesteps:
        raise RangeError(f"timestep {t} outside schedule range [1, {schedule.timesteps}]")
    if z_t.ndim != 4:
        raise DimensionError(f"expected [B, C, h, w] latent, got {tuple(z_t.shape)}")
    return model(z_t, int(t), _as_context(c, z_t.shape[0], z_t.dtype))


def cfg_predict(z_t: torch.Tensor, t: int, c_cond, c_neg, guidance_scale: float,
                model: Denoiser, schedule: NoiseSchedule) -> torch.Tensor:
    """Classifier-free guidance: eps_neg + s * (eps_cond - eps_neg).

    s = 1 collapses to the conditional prediction exactly (single call).
    """
    if guidance_scale < 0:
        raise RangeError(f"guidance scale must be >= 0, got {guidance_scale}")
    eps_cond = predict_noise(z_t, t, c_cond, model, schedule)
    if guidance_scale == 1.0:
        return eps_cond
    eps_neg = predict_noise(z_t, t, c_neg, model, schedule)
    return eps_neg + guidance_scale * (eps_cond - eps_neg)


def ddim_sample(noise: torch.Tensor, steps: int, c, model: Denoiser,
                schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic multi-step sampler (eta = 0), from pure noise to a clean latent."""
    if steps < 1:
        raise RangeError(f"steps must be >= 1, got {steps}")
    ts = np.unique(np.linspace(schedule.timesteps, 1, steps).round().astype(int))[::-1]
    z = noise
    with torch.no_grad():
        z0 = z
        for i, t in enumerate(ts):
            eps = predict_noise(z, int(t), c, model, schedule)
            z0 = one_step_denoise(z, eps, int(t), schedule)
            if i + 1 < len(ts):
                a_next, b_next = schedule.coeffs(int(ts[i + 1]))
                z = a_next * z0 + b_next * eps
    return z0


def pretrain_teacher(hq_images: np.ndarray, tag_lists, vae, schedule: NoiseSchedule,
                     model_cfg, config, seed: int, embedder, device: str = "cpu",
                     log=None) -> tuple[Denoiser, dict]:
    """Denoising-score-matching pretraining of the teacher on HQ latents.

    Conditioning uses per-image tags with random dropout to the null
    embedding so guidance has an unconditional branch to lean on. The
    manifest records the held-out loss curve and the generated-sample
    Frechet distance against the training corpus, checked against the
    configured floor.
    """
    from .metrics import pooled_encoder_features, toy_frechet
    from .prompts import embed_batch
    from .vae import decode_latents, encode_images

    if len(hq_images) == 0:
        raise DataError("teacher pretraining dataset is empty")
    latents = encode_images(vae, hq_images)
    n_hold = max(1, int(len(latents) * config.holdout_fraction))
    train_z, hold_z = latents[:-n_hold], latents[-n_hold:]
    train_tags, hold_tags = tag_lists[:-n_hold], tag_lists[-n_hold:]

    ss = np.random.SeedSequence([seed, 21])
    torch.manual_seed(int(ss.generate_state(1)[0]))
    model = Denoiser(latent_channels=model_cfg.latent_channels, width=model_cfg.denoiser_width,
                     mult=tuple(model_cfg.denoiser_mult), temb_dim=model_cfg.temb_dim,
                     text_dim=model_cfg.text_dim, heads=model_cfg.attn_heads).to(device)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 22]))

    # Fixed evaluation set: held-out loss is deterministic, so its
    # per-epoch curve is a meaningful convergence oracle.
    ev_rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    ev_t = ev_rng.integers(1, schedule.timesteps + 1, size=len(hold_z))
    ev_eps = ev_rng.standard_normal(hold_z.shape).astype(np.float32)
    ev_a, ev_b = schedule.coeff_arrays(ev_t)
    ev_zt = (ev_a[:, None, None, None] * hold_z + ev_b[:, None, None, None] * ev_eps)
    ev_ctx = torch.from_numpy(embed_batch(embedder, hold_tags))
    ev_zt_t = torch.from_numpy(ev_zt.astype(np.float32))
    ev_eps_t = torch.from_numpy(ev_eps)
    ev_tt = torch.from_numpy(ev_t.astype(np.int64))

    null_tags: list = []
    steps_per_epoch = config.steps_per_epoch or max(1, len(train_z) // config.batch)
    curve = []
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(train_z), size=config.batch)
            t = rng.integers(1, schedule.timesteps + 1, size=config.batch)
            eps = rng.standard_normal((config.batch,) + train_z.shape[1:]).astype(np.float32)
            a, b = schedule.coeff_arrays(t)
            z_t = (a[:, None, None, None] * train_z[idx]
                   + b[:, None, None, None] * eps).astype(np.float32)
            tags = [null_tags if rng.random() < config.prompt_dropout else train_tags[j]
                    for j in idx]
            ctx = torch.from_numpy(embed_batch(embedder, tags)).to(device)
            pred = model(torch.from_numpy(z_t).to(device),
                         torch.from_numpy(t.astype(np.int64)).to(device), ctx)
            loss = torch.mean((pred - torch.from_numpy(eps).to(device)) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            hold_loss = float(torch.mean((model(ev_zt_t, ev_tt, ev_ctx) - ev_eps_t) ** 2))
        curve.append(hold_loss)
        if log:
            log({"stage": "teacher", "epoch": epoch, "holdout_loss": hold_loss})

    model.eval()
    # Quality floor: Frechet distance between multi-step samples and the corpus.
    smp_rng = np.random.default_rng(np.random.SeedSequence([seed, 24]))
    noise = torch.from_numpy(
        smp_rng.standard_normal((config.sample_count,) + train_z.shape[1:]).astype(np.float32))
    smp_tags = [train_tags[j] for j in smp_rng.integers(0, len(train_tags),
                                                        size=config.sample_count)]
    ctx = torch.from_numpy(embed_batch(embedder, smp_tags))
    z0 = ddim_sample(noise, config.sample_steps, ctx, model, schedule)
    sample_images = decode_latents(vae, z0.numpy())
    fd = toy_frechet(pooled_encoder_features(vae, sample_images),
                     pooled_encoder_features(vae, hq_images))
    manifest = {
        "holdout_loss_curve": curve,
        "sample_frechet": float(fd),
        "frechet_floor": config.frechet_floor,
        "sample_steps": config.sample_steps,
    }
    if fd > config.frechet_floor:
        raise TrainingFailureError(
            f"teacher sample Frechet {fd:.3f} above floor {config.frechet_floor}",
            diagnostics=manifest)
    return model, manifest
