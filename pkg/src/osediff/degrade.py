"""Second-order degradation pipeline for synthesizing LQ-HQ training pairs.

Each pair runs the HQ image through two rounds of
blur -> random resize -> additive noise -> JPEG compression, then a final
antialiased bicubic resize to 1/scale. Every sampled parameter lands in a
replayable record, and each pair derives its RNG stream from
(seed, index), so parallel and serial synthesis agree bit-exactly.
"""

import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError, RangeError
from .images import clamp_unit, load_image, save_image, to_uint8, to_unit_range
from .resize import RESIZE_MODES, downsample_bicubic, resize, upsample_bicubic
from .textures import sample_texture


@dataclass
class DegradationStage:
    """Sampling ranges for one degradation round."""

    blur_prob: float = 1.0
    blur_sigma: tuple[float, float] = (0.3, 1.4)
    blur_kernel_sizes: tuple[int, ...] = (3, 5, 7)
    resize_range: tuple[float, float] = (0.7, 1.3)
    resize_modes: tuple[str, ...] = ("nearest", "bilinear", "bicubic")
    noise_prob: float = 1.0
    gaussian_noise_prob: float = 0.6
    gaussian_sigma: tuple[float, float] = (2.0, 14.0)
    poisson_scale: tuple[float, float] = (60.0, 300.0)
    jpeg_prob: float = 1.0
    jpeg_quality: tuple[int, int] = (30, 95)

    def validate(self):
        for name in ("blur_sigma", "resize_range", "gaussian_sigma", "poisson_scale",
                     "jpeg_quality"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise RangeError(f"degradation range {name} is not well-ordered: ({lo}, {hi})")
        for mode in self.resize_modes:
            if mode not in RESIZE_MODES:
                raise RangeError(f"unknown resize mode {mode!r}")


def _default_stages():
    return (DegradationStage(),
            DegradationStage(blur_prob=0.5, gaussian_sigma=(1.0, 8.0), jpeg_prob=0.7))


@dataclass
class DegradationConfig:
    scale: int = 4
    stages: tuple[DegradationStage, ...] = field(default_factory=_default_stages)

    def validate(self):
        if self.scale < 1:
            raise RangeError(f"scale must be >= 1, got {self.scale}")
        for stage in self.stages:
            stage.validate()


def _gaussian_kernel1d(sigma: float, ksize: int) -> np.ndarray:
    x = np.arange(ksize, dtype=np.float64) - (ksize - 1) / 2.0
    k = np.exp(-0.5 * (x / max(sigma, 1e-8)) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float, ksize: int) -> np.ndarray:
    k = _gaussian_kernel1d(sigma, ksize)
    pad = ksize // 2
    out = np.pad(img.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, out)
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 2, out)
    return out.astype(np.float32)


def _jpeg_round_trip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return to_unit_range(np.asarray(im.convert("RGB")))


def _sample_stage(stage: DegradationStage, rng: np.random.Generator) -> dict:
    """Draw one stage's concrete parameters. Draw order is fixed; replay
    relies only on the record, never on the RNG."""
    rec: dict = {}
    if rng.random() < stage.blur_prob:
        rec["blur"] = {
            "sigma": float(rng.uniform(*stage.blur_sigma)),
            "ksize": int(rng.choice(stage.blur_kernel_sizes)),
        }
    rec["resize"] = {
        "factor": float(rng.uniform(*stage.resize_range)),
        "mode": str(stage.resize_modes[rng.integers(0, len(stage.resize_modes))]),
    }
    if rng.random() < stage.noise_prob:
        if rng.random() < stage.gaussian_noise_prob:
            rec["noise"] = {"kind": "gaussian",
                            "sigma": float(rng.uniform(*stage.gaussian_sigma)),
                            "seed": int(rng.integers(0, 2**63 - 1))}
        else:
            rec["noise"] = {"kind": "poisson",
                            "scale": float(rng.uniform(*stage.poisson_scale)),
                            "seed": int(rng.integers(0, 2**63 - 1))}
    if rng.random() < stage.jpeg_prob:
        lo, hi = stage.jpeg_quality
        rec["jpeg"] = {"quality": int(rng.integers(lo, hi + 1))}
    return rec


def _apply_stage(img: np.ndarray, rec: dict, base_hw: tuple[int, int]) -> np.ndarray:
    if "blur" in rec:
        img = _blur(img, rec["blur"]["sigma"], rec["blur"]["ksize"])
    rz = rec["resize"]
    out_h = max(8, int(round(base_hw[0] * rz["factor"])))
    out_w = max(8, int(round(base_hw[1] * rz["factor"])))
    img = resize(img, out_h, out_w, mode=rz["mode"])
    if "noise" in rec:
        noise_rng = np.random.default_rng(rec["noise"]["seed"])
        if rec["noise"]["kind"] == "gaussian":
            sigma = rec["noise"]["sigma"] / 255.0 * 2.0
            img = img + sigma * noise_rng.standard_normal(img.shape).astype(np.float32)
        else:
            lam = rec["noise"]["scale"]
            x01 = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
            img = (noise_rng.poisson(x01 * lam) / lam * 2.0 - 1.0).astype(np.float32)
        img = clamp_unit(img).astype(np.float32)
    if "jpeg" in rec:
        img = _jpeg_round_trip(img, rec["jpeg"]["quality"])
    return clamp_unit(img).astype(np.float32)


def apply_record(x_hq: np.ndarray, record: dict, cfg: DegradationConfig) -> np.ndarray:
    """Replay a degradation record on an HQ image, producing x_L_raw."""
    h, w = x_hq.shape[1], x_hq.shape[2]
    img = x_hq
    for stage_rec in record["stages"]:
        img = _apply_stage(img, stage_rec, (h, w))
    img = resize(img, h // cfg.scale, w // cfg.scale, mode="bicubic", antialias=True)
    return clamp_unit(img).astype(np.float32)


@dataclass
class TrainingPair:
    x_hq: np.ndarray      # [3, H, W]
    x_lq_raw: np.ndarray  # [3, H/scale, W/scale]
    x_lq: np.ndarray      # [3, H, W], bicubic pre-upsampled
    record: dict


def degrade(x_hq: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> TrainingPair:
    """Synthesize one LQ-HQ pair and its replayable degradation record."""
    cfg.validate()
    h, w = x_hq.shape[1], x_hq.shape[2]
    if h % cfg.scale or w % cfg.scale:
        raise DimensionError(f"HQ dims {h}x{w} not divisible by scale {cfg.scale}")
    record = {"stages": [_sample_stage(stage, rng) for stage in cfg.stages]}
    x_lq_raw = apply_record(x_hq, record, cfg)
    x_lq = clamp_unit(upsample_bicubic(x_lq_raw, cfg.scale)).astype(np.float32)
    return TrainingPair(x_hq=x_hq, x_lq_raw=x_lq_raw, x_lq=x_lq, record=record)


def _config_dict(cfg: DegradationConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def config_hash(cfg: DegradationConfig) -> str:
    blob = json.dumps(_config_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _iter_source(hq_source, count: int, size: int, seed: int):
    """Yield (image, class_label) for each index, from a directory or the
    procedural texture generator."""
    if hq_source == "procedural":
        for index in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, index]))
            img, label = sample_texture(rng, size)
            yield img, label
        return
    src = Path(hq_source)
    if not src.is_dir():
        raise DataError(f"HQ source {src} is not a directory (or 'procedural')")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG files under {src}")
    for index in range(count):
        yield load_image(files[index % len(files)]), ""


def synthesize_dataset(hq_source, count: int, cfg: DegradationConfig, seed: int,
                       out_dir, size: int = 32) -> dict:
    """Write ``count`` pairs plus a manifest; fully reproducible from (seed, config)."""
    cfg.validate()
    if count < 1:
        raise RangeError(f"pair count must be >= 1, got {count}")
    out = Path(out_dir)
    (out / "hq").mkdir(parents=True, exist_ok=True)
    (out / "lq").mkdir(parents=True, exist_ok=True)
    pairs = []
    for index, (img, label) in enumerate(_iter_source(hq_source, count, size, seed)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, index]))
        # Quantize the HQ image first so the stored PNG is exactly what the
        # record replays from.
        img = to_unit_range(to_uint8(img))
        pair = degrade(img, cfg, rng)
        name = f"{index:04d}.png"
        save_image(out / "hq" / name, pair.x_hq)
        save_image(out / "lq" / name, pair.x_lq_raw)
        pairs.append({"index": index, "hq": f"hq/{name}", "lq": f"lq/{name}",
                      "class": label, "record": pair.record})
    manifest = {
        "seed": seed,
        "count": count,
        "source": str(hq_source),
        "config": _config_dict(cfg),
        "config_hash": config_hash(cfg),
        "pairs": pairs,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    return manifest
