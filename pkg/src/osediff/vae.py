"""Toy variational autoencoder providing the latent space.

The encoder compresses [3, H, W] images (values in [-1, 1]) to
[latent_channels, H/f, W/f] latents; ``encode`` returns the posterior
mean, so both training and inference are deterministic. The decoder is
pretrained once and then frozen for good: the student never touches it.
"""

import numpy as np
import torch
from torch import nn

from .errors import DataError, DimensionError, TrainingFailureError
from .nets import ResBlock, _norm

LATENT_CHANNELS = 4
SPATIAL_FACTOR = 4


class Encoder(nn.Module):
    def __init__(self, latent_channels: int, width: int):
        super().__init__()
        self.conv_in = nn.Conv2d(3, width, 3, padding=1)
        self.down1 = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.block1 = ResBlock(width * 2, width * 2)
        self.down2 = nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1)
        self.block2 = ResBlock(width * 2, width * 2)
        self.norm_out = _norm(width * 2)
        self.conv_out = nn.Conv2d(width * 2, 2 * latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv_in(x)
        h = self.block1(self.down1(h))
        h = self.block2(self.down2(h))
        return self.conv_out(self.act(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, latent_channels: int, width: int):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, width * 2, 3, padding=1)
        self.block1 = ResBlock(width * 2, width * 2)
        self.up1 = nn.Conv2d(width * 2, width * 2, 3, padding=1)
        self.block2 = ResBlock(width * 2, width)
        self.up2 = nn.Conv2d(width, width, 3, padding=1)
        self.norm_out = _norm(width)
        self.conv_out = nn.Conv2d(width, 3, 3, padding=1)
        self.act = nn.SiLU()
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, z):
        h = self.block1(self.conv_in(z))
        h = self.up1(self.upsample(h))
        h = self.block2(h)
        h = self.up2(self.upsample(h))
        return torch.tanh(self.conv_out(self.act(self.norm_out(h))))


class ToyVAE(nn.Module):
    def __init__(self, latent_channels: int = LATENT_CHANNELS, width: int = 32,
                 factor: int = SPATIAL_FACTOR):
        super().__init__()
        if factor != 4:
            raise DimensionError("the two-stride-2 architecture fixes the spatial factor at 4")
        self.latent_channels = latent_channels
        self.factor = factor
        self.encoder = Encoder(latent_channels, width)
        self.decoder = Decoder(latent_channels, width)

    def _check_image(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected [B, 3, H, W] images, got {tuple(x.shape)}")
        if x.shape[2] % self.factor or x.shape[3] % self.factor:
            raise DimensionError(
                f"image dims {x.shape[2]}x{x.shape[3]} not divisible by factor {self.factor}")

    def encode_moments(self, x):
        self._check_image(x)
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, torch.clamp(logvar, -20.0, 10.0)

    def encode(self, x):
        """Deterministic latent: the posterior mean."""
        return self.encode_moments(x)[0]

    def decode(self, z):
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(
                f"expected [B, {self.latent_channels}, h, w] latents, got {tuple(z.shape)}")
        return self.decoder(z)


def encode_images(vae: ToyVAE, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """numpy [N, 3, H, W] -> numpy latents, no grad."""
    device = next(vae.parameters()).device
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.asarray(images[i:i + batch], dtype=np.float32))
            out.append(vae.encode(x.to(device)).cpu().numpy())
    return np.concatenate(out, axis=0)


def decode_latents(vae: ToyVAE, latents: np.ndarray, batch: int = 64) -> np.ndarray:
    device = next(vae.parameters()).device
    out = []
    with torch.no_grad():
        for i in range(0, len(latents), batch):
            z = torch.from_numpy(np.asarray(latents[i:i + batch], dtype=np.float32))
            out.append(vae.decode(z.to(device)).cpu().numpy())
    return np.concatenate(out, axis=0)


def pretrain_vae(images: np.ndarray, model_cfg, config, seed: int, device: str = "cpu",
                 log=None) -> tuple[ToyVAE, dict]:
    """Train the toy VAE with reconstruction + small-KL loss.

    Returns the model and a manifest recording held-out reconstruction
    PSNR and the encode(decode(z)) round-trip error that downstream
    distillation leans on. Raises TrainingFailureError if the PSNR floor
    is not reached.
    """
    from .metrics import psnr

    if len(images) == 0:
        raise DataError("VAE pretraining dataset is empty")
    ss = np.random.SeedSequence([seed, 11])
    torch.manual_seed(int(ss.generate_state(1)[0]))
    vae = ToyVAE(latent_channels=model_cfg.latent_channels, width=model_cfg.vae_width).to(device)

    n_hold = max(1, int(len(images) * config.holdout_fraction))
    train_x, hold_x = images[:-n_hold], images[-n_hold:]
    opt = torch.optim.AdamW(vae.parameters(), lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    noise_gen = torch.Generator().manual_seed(int(ss.generate_state(2)[1]))

    steps_per_epoch = max(1, len(train_x) // config.batch)
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(train_x), size=config.batch)
            x = torch.from_numpy(train_x[idx]).to(device)
            mean, logvar = vae.encode_moments(x)
            eps = torch.randn(mean.shape, generator=noise_gen).to(device)
            z = mean + torch.exp(0.5 * logvar) * eps
            recon = vae.decode(z)
            rec_loss = torch.mean((recon - x) ** 2)
            kl = 0.5 * torch.mean(mean**2 + torch.exp(logvar) - 1.0 - logvar)
            loss = rec_loss + config.kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        if log:
            log({"stage": "vae", "epoch": epoch, "loss": epoch_loss / steps_per_epoch})

    vae.eval()
    with torch.no_grad():
        hold = torch.from_numpy(hold_x).to(device)
        recon = vae.decode(vae.encode(hold)).cpu().numpy()
    psnrs = [psnr(hold_x[i], recon[i]) for i in range(len(hold_x))]
    mean_psnr = float(np.mean(psnrs))

    roundtrip_mae = measure_latent_roundtrip(vae, hold_x, seed=seed)
    manifest = {
        "holdout_psnr": mean_psnr,
        "psnr_floor": config.psnr_floor,
        "latent_roundtrip_mae": roundtrip_mae,
        "latent_roundtrip_threshold": max(1.5 * roundtrip_mae, 1e-3),
        "holdout_count": int(n_hold),
    }
    if mean_psnr < config.psnr_floor:
        raise TrainingFailureError(
            f"VAE reconstruction PSNR {mean_psnr:.2f} dB below floor {config.psnr_floor} dB",
            diagnostics=manifest)
    return vae, manifest


def measure_latent_roundtrip(vae: ToyVAE, images: np.ndarray, seed: int = 0,
                             n_latents: int = 100) -> float:
    """Mean |encode(decode(z)) - z| over latents resampled from the encoder's
    empirical distribution (its outputs on the given images)."""
    lat = encode_images(vae, images)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    z = lat[rng.integers(0, len(lat), size=n_latents)]
    with torch.no_grad():
        zt = torch.from_numpy(z)
        back = vae.encode(vae.decode(zt))
        return float(torch.mean(torch.abs(back - zt)))
