"""The two-network training scheme, end to end.

Per iteration: (1) run the student forward on an LQ batch, (2) update the
generator adapters from data loss plus the weighted distillation
surrogate, (3) update the finetuned-regularizer adapters from the
diffusion loss on the detached student latent. The two updates are
sequential and own separate optimizers. Checkpoints carry base weights,
both adapter sets, optimizer state, the schedule, a config echo, and a
manifest; resuming from one continues bit-identically because every
iteration derives its RNG stream from (seed, iteration).
"""

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RootConfig, _build, config_to_dict
from .degrade import DegradationConfig
from .denoiser import Denoiser, ddim_sample
from .errors import ConfigurationError, DataError, TrainingFailureError
from .generator import GeneratorBundle, forward_train, restore_many
from .lora import (OWNER_REGULARIZER, AdapterSet, combine, default_targets, inject)
from .losses import DataLossConfig, data_loss
from .metrics import metric_report, pooled_encoder_features, toy_frechet
from .prompts import TagEmbedder, make_extractor
from .schedule import NoiseSchedule, make_schedule
from .vae import ToyVAE
from .vsd import default_vsd_t_range, reg_gradient, regularizer_loss

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    x_hq: np.ndarray      # [N, 3, H, W]
    x_lq_raw: np.ndarray  # [N, 3, H/s, W/s]
    x_lq: np.ndarray      # [N, 3, H, W] pre-upsampled
    labels: list[str]
    manifest: dict


def load_dataset(data_dir) -> Dataset:
    from .images import load_image
    from .resize import upsample_bicubic

    root = Path(data_dir)
    manifest_file = root / "manifest.json"
    if not manifest_file.is_file():
        raise DataError(f"{root} has no manifest.json; run the degrade command first")
    manifest = json.loads(manifest_file.read_text())
    scale = manifest["config"]["scale"]
    hq, lq_raw, lq, labels = [], [], [], []
    for pair in manifest["pairs"]:
        hq.append(load_image(root / pair["hq"]))
        raw = load_image(root / pair["lq"])
        lq_raw.append(raw)
        lq.append(np.clip(upsample_bicubic(raw, scale), -1.0, 1.0).astype(np.float32))
        labels.append(pair.get("class", ""))
    return Dataset(np.stack(hq), np.stack(lq_raw), np.stack(lq), labels, manifest)


def holdout_split(n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_hold = max(1, int(n * fraction)) if n > 1 else 0
    idx = np.arange(n)
    return idx[: n - n_hold], idx[n - n_hold:]


@dataclass
class TrainerState:
    cfg: RootConfig
    schedule: NoiseSchedule
    vae: ToyVAE
    frozen_vae: ToyVAE  # pristine copy; metric featurizer, never adapted
    teacher: Denoiser
    student: Denoiser
    regularizer: Denoiser
    theta: AdapterSet
    phi_prime: AdapterSet
    opt_theta: torch.optim.Optimizer
    opt_phi_prime: torch.optim.Optimizer
    bundle: GeneratorBundle
    data_cfg: DataLossConfig
    embedder: TagEmbedder
    neg_ctx: np.ndarray
    teacher_manifest: dict
    iteration: int = 0

    def vsd_t_range(self):
        lo, hi = default_vsd_t_range(self.schedule)
        t = self.cfg.train
        return (t.vsd_t_min or lo, t.vsd_t_max or hi)

    def reg_t_range(self):
        t = self.cfg.train
        return (t.reg_t_min, t.reg_t_max or self.schedule.timesteps)


def _freeze(module: torch.nn.Module):
    module.requires_grad_(False)


def build_models_from_arrays(arrays: dict, ckpt_config: dict
                             ) -> tuple[ToyVAE, Denoiser, NoiseSchedule]:
    """Reconstruct pristine VAE + denoiser + schedule from checkpoint arrays."""
    from .config import ModelConfig, ScheduleConfig

    model_cfg = _build(ModelConfig, ckpt_config.get("model", {}), "model")
    sched_cfg = _build(ScheduleConfig, ckpt_config.get("schedule", {}), "schedule")
    schedule = make_schedule(sched_cfg.timesteps, sched_cfg.kind,
                             sched_cfg.beta_start, sched_cfg.beta_end)
    if "schedule/alpha" in arrays:
        stored = np.asarray(arrays["schedule/alpha"], dtype=np.float64)
        if stored.shape != schedule.alpha.shape or np.max(np.abs(stored - schedule.alpha)) > 1e-6:
            raise ConfigurationError("checkpoint schedule arrays disagree with its config")
    vae = ToyVAE(latent_channels=model_cfg.latent_channels, width=model_cfg.vae_width)
    ckpt.load_module_arrays(vae, arrays, "vae")
    den = Denoiser(latent_channels=model_cfg.latent_channels, width=model_cfg.denoiser_width,
                   mult=tuple(model_cfg.denoiser_mult), temb_dim=model_cfg.temb_dim,
                   text_dim=model_cfg.text_dim, heads=model_cfg.attn_heads)
    if any(k.startswith("denoiser/") for k in arrays):
        ckpt.load_module_arrays(den, arrays, "denoiser")
    _freeze(vae)
    _freeze(den)
    vae.eval()
    den.eval()
    return vae, den, schedule


def base_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Current base weights of a possibly-adapted module, under pristine names."""
    out = {}
    for key, val in module.state_dict().items():
        if key.endswith("lora_A") or key.endswith("lora_B"):
            continue
        out[f"{prefix}/{key.replace('.base.', '.')}"] = \
            val.detach().cpu().numpy().astype(np.float32)
    return out


def init_trainer(cfg: RootConfig, teacher_ckpt_dir, seed: int,
                 device: str = "cpu") -> TrainerState:
    """Load the pretrained stage, inject both adapter sets, set up optimizers."""
    if teacher_ckpt_dir is None:
        raise ConfigurationError("training needs a pretrained teacher checkpoint")
    arrays, t_config, t_manifest = ckpt.load_checkpoint(teacher_ckpt_dir)
    if not any(k.startswith("denoiser/") for k in arrays):
        raise ConfigurationError(
            f"{teacher_ckpt_dir} holds no denoiser weights; pass a teacher checkpoint")
    vae, teacher, schedule = build_models_from_arrays(arrays, t_config)
    vae.to(device)
    teacher.to(device)
    frozen_vae = copy.deepcopy(vae)

    student = copy.deepcopy(teacher)
    regularizer = copy.deepcopy(teacher)

    rank, scale = cfg.model.lora_rank, cfg.model.lora_scale
    gen = torch.Generator().manual_seed(
        int(np.random.SeedSequence([seed, 31]).generate_state(1)[0]))
    enc_set = inject(vae.encoder, default_targets(vae.encoder), rank, scale,
                     generator=gen, prefix="encoder.")
    den_set = inject(student, default_targets(student), rank, scale,
                     generator=gen, prefix="denoiser.")
    theta = combine(enc_set, den_set)
    phi_prime = inject(regularizer, default_targets(regularizer), rank, scale,
                       owner=OWNER_REGULARIZER, generator=gen, prefix="denoiser.")

    train_cfg = cfg.train
    opt_theta = torch.optim.AdamW(list(theta.parameters()), lr=train_cfg.lr,
                                  weight_decay=train_cfg.weight_decay)
    opt_phi = torch.optim.AdamW(list(phi_prime.parameters()), lr=train_cfg.lr,
                                weight_decay=train_cfg.weight_decay)

    embedder = TagEmbedder(dim=cfg.model.text_dim)
    extractor = make_extractor(train_cfg.prompt_extractor)
    bundle = GeneratorBundle(vae=vae, denoiser=student, schedule=schedule,
                             extractor=extractor, embedder=embedder, adapters=theta)
    data_cfg = DataLossConfig(lambda1=train_cfg.lambda1)
    neg_ctx = embedder.embed_text(train_cfg.negative_prompt)
    return TrainerState(cfg=cfg, schedule=schedule, vae=vae, frozen_vae=frozen_vae,
                        teacher=teacher, student=student, regularizer=regularizer,
                        theta=theta, phi_prime=phi_prime, opt_theta=opt_theta,
                        opt_phi_prime=opt_phi, bundle=bundle, data_cfg=data_cfg,
                        embedder=embedder, neg_ctx=neg_ctx, teacher_manifest=t_manifest)


def state_checkpoint_arrays(state: TrainerState) -> dict[str, np.ndarray]:
    arrays = {}
    arrays.update(base_arrays(state.vae, "vae"))
    arrays.update(base_arrays(state.student, "denoiser"))
    arrays["schedule/alpha"] = state.schedule.alpha.astype(np.float32)
    arrays["schedule/beta"] = state.schedule.beta.astype(np.float32)
    for name, arr in state.theta.arrays().items():
        arrays[f"adapters/generator/{name}"] = arr
    for name, arr in state.phi_prime.arrays().items():
        arrays[f"adapters/regularizer/{name}"] = arr
    arrays.update(ckpt.optimizer_arrays(state.opt_theta,
                                        list(state.theta.named_parameters()),
                                        "optim/theta"))
    arrays.update(ckpt.optimizer_arrays(state.opt_phi_prime,
                                        list(state.phi_prime.named_parameters()),
                                        "optim/phi_prime"))
    return arrays


def save_state(state: TrainerState, path, seed: int, extra_manifest: dict | None = None):
    manifest = {
        "iteration": state.iteration,
        "seed": seed,
        "teacher": state.teacher_manifest,
        "config_hash": hashlib.sha256(
            json.dumps(config_to_dict(state.cfg), sort_keys=True).encode()).hexdigest()[:16],
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    ckpt.save_checkpoint(path, state_checkpoint_arrays(state),
                         config_to_dict(state.cfg), manifest)


def load_state_arrays(state: TrainerState, arrays: dict, manifest: dict):
    state.theta.load_arrays({name[len("adapters/generator/"):]: arr
                             for name, arr in arrays.items()
                             if name.startswith("adapters/generator/")})
    state.phi_prime.load_arrays({name[len("adapters/regularizer/"):]: arr
                                 for name, arr in arrays.items()
                                 if name.startswith("adapters/regularizer/")})
    ckpt.load_optimizer_arrays(state.opt_theta, list(state.theta.named_parameters()),
                               arrays, "optim/theta")
    ckpt.load_optimizer_arrays(state.opt_phi_prime,
                               list(state.phi_prime.named_parameters()),
                               arrays, "optim/phi_prime")
    state.iteration = int(manifest["iteration"])


def train_step(state: TrainerState, x_l: np.ndarray, x_h: np.ndarray,
               rng: np.random.Generator) -> dict:
    """One iteration: student forward, theta update, phi-prime update."""
    cfg = state.cfg.train
    ctx, _, z_hat, x_hat = forward_train(state.bundle, x_l)
    target = torch.from_numpy(np.asarray(x_h, dtype=np.float32)).to(x_hat.device)
    l_data, parts = data_loss(x_hat, target, state.data_cfg)

    if cfg.lambda2 != 0.0:
        surrogate, rec = reg_gradient(
            z_hat, ctx, state.teacher, state.regularizer, state.schedule, rng,
            cfg.cfg_scale, state.neg_ctx, state.vsd_t_range(),
            cfg.cfg_on_finetuned_reg, cfg.vsd_weighting, cfg.omega_norm)
        total = l_data + cfg.lambda2 * surrogate
        omega, l_reg = rec.omega, rec.loss_value
        reg_grad_norm = cfg.lambda2 * float(torch.linalg.vector_norm(rec.grad))
        vsd_t = rec.t
    else:
        total = l_data
        omega, l_reg, reg_grad_norm, vsd_t = 0.0, 0.0, 0.0, 0
    if not torch.isfinite(total):
        raise TrainingFailureError(
            f"non-finite generator loss at iteration {state.iteration + 1}",
            diagnostics={"iteration": state.iteration + 1,
                         "L_data": float(l_data.detach())})

    state.opt_theta.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip_enabled:
        torch.nn.utils.clip_grad_norm_(list(state.theta.parameters()), cfg.grad_clip)
    state.opt_theta.step()

    l_diff, diff_t = regularizer_loss(z_hat.detach(), ctx, state.regularizer,
                                      state.schedule, rng, state.reg_t_range())
    if not torch.isfinite(l_diff):
        raise TrainingFailureError(
            f"non-finite regularizer loss at iteration {state.iteration + 1}",
            diagnostics={"iteration": state.iteration + 1})
    state.opt_phi_prime.zero_grad(set_to_none=True)
    l_diff.backward()
    if cfg.grad_clip_enabled:
        torch.nn.utils.clip_grad_norm_(list(state.phi_prime.parameters()), cfg.grad_clip)
    state.opt_phi_prime.step()

    return {
        "L_data": float(l_data.detach()), "L_mse": parts["mse"],
        "L_perceptual": parts["perceptual"], "L_reg": l_reg,
        "L_diff": float(l_diff.detach()), "omega": omega, "lr": cfg.lr,
        "reg_grad_norm": reg_grad_norm, "vsd_t": vsd_t, "diff_t": diff_t,
    }


def evaluate_holdout(state: TrainerState, data: Dataset, hold_idx) -> dict:
    """Held-out metrics for the student against the bicubic baseline."""
    x_l = data.x_lq[hold_idx]
    x_h = data.x_hq[hold_idx]
    student_out = restore_many(x_l, state.bundle)
    student = metric_report(student_out, x_h)
    baseline = metric_report(x_l, x_h)
    hq_feats = pooled_encoder_features(state.frozen_vae, data.x_hq)
    metrics = {
        "student_psnr": student["psnr_mean"],
        "student_ssim": student["ssim_mean"],
        "baseline_psnr": baseline["psnr_mean"],
        "baseline_ssim": baseline["ssim_mean"],
        "holdout_count": int(len(hold_idx)),
    }
    if len(hold_idx) >= hq_feats.shape[1] + 1:
        metrics["student_frechet"] = toy_frechet(
            pooled_encoder_features(state.frozen_vae, student_out), hq_feats)
        metrics["baseline_frechet"] = toy_frechet(
            pooled_encoder_features(state.frozen_vae, x_l), hq_feats)
    return metrics


def train(cfg: RootConfig, data_dir, out_dir, seed: int, teacher_ckpt=None,
          resume_from=None, progress=None, device: str = "cpu") -> Path:
    """Run the full distillation loop; returns the final checkpoint path."""
    from .config import write_resolved_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    data = load_dataset(data_dir)
    train_idx, hold_idx = holdout_split(len(data.x_hq), cfg.train.holdout_fraction)
    if len(train_idx) == 0:
        raise DataError("dataset too small: no training pairs left after holdout split")

    if resume_from is not None:
        arrays, r_config, r_manifest = ckpt.load_checkpoint(resume_from)
        state = init_trainer(cfg, resume_from, seed, device)
        load_state_arrays(state, arrays, r_manifest)
    else:
        state = init_trainer(cfg, teacher_ckpt, seed, device)

    log_path = out / "train_log.jsonl"
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    with log_path.open(mode) as log_file:
        for i in range(state.iteration + 1, cfg.train.iterations + 1):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 100, i]))
            idx = train_idx[rng.integers(0, len(train_idx), size=cfg.train.batch)]
            record = train_step(state, data.x_lq[idx], data.x_hq[idx], rng)
            state.iteration = i
            record["iteration"] = i
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if progress and (i % 25 == 0 or i == cfg.train.iterations):
                progress(record)
            if cfg.train.checkpoint_every and i % cfg.train.checkpoint_every == 0 \
                    and i < cfg.train.iterations:
                save_state(state, out / f"ckpt-{i:06d}", seed)

    metrics = evaluate_holdout(state, data, hold_idx) if len(hold_idx) else {}
    final = out / "ckpt-final"
    save_state(state, final, seed, {"holdout_metrics": metrics,
                                    "dataset_seed": data.manifest.get("seed"),
                                    "dataset_config_hash": data.manifest.get("config_hash")})
    return final


def load_student_bundle(ckpt_dir, extractor_spec: str | None = None,
                        merge_lora: bool = False):
    """Rebuild the inference generator from a checkpoint.

    Returns (bundle, resolved-config dict, pre-upsample scale). A
    checkpoint without adapter arrays loads as the zero-init student
    (identical to the teacher composition). With ``merge_lora`` the
    adapters are fused into the base weights before use.
    """
    from .lora import merge

    arrays, cfg_dict, _ = ckpt.load_checkpoint(ckpt_dir)
    cfg = _build(RootConfig, cfg_dict, "")
    vae, student, schedule = build_models_from_arrays(arrays, cfg_dict)

    gen = torch.Generator().manual_seed(0)
    enc_set = inject(vae.encoder, default_targets(vae.encoder), cfg.model.lora_rank,
                     cfg.model.lora_scale, generator=gen, prefix="encoder.")
    den_set = inject(student, default_targets(student), cfg.model.lora_rank,
                     cfg.model.lora_scale, generator=gen, prefix="denoiser.")
    gen_arrays = {name[len("adapters/generator/"):]: arr for name, arr in arrays.items()
                  if name.startswith("adapters/generator/")}
    if gen_arrays:
        theta = combine(enc_set, den_set)
        theta.load_arrays(gen_arrays)
    if merge_lora:
        vae.encoder = merge(enc_set, vae.encoder, prefix="encoder.")
        student = merge(den_set, student, prefix="denoiser.")
        _freeze(vae)
        _freeze(student)
    embedder = TagEmbedder(dim=cfg.model.text_dim)
    extractor = make_extractor(extractor_spec or cfg.train.prompt_extractor)
    bundle = GeneratorBundle(vae=vae, denoiser=student, schedule=schedule,
                             extractor=extractor, embedder=embedder)
    return bundle, cfg_dict, cfg.degrade.scale


def sample_teacher(noise: torch.Tensor, steps: int, c, teacher: Denoiser,
                   schedule: NoiseSchedule, vae: ToyVAE) -> np.ndarray:
    """Multi-step generation baseline: DDIM from pure noise, decoded to images."""
    if steps == 1:
        logger.warning("one-step sampling from pure noise is ill-posed generation; "
                       "proceeding anyway")
    z0 = ddim_sample(noise, steps, c, teacher, schedule)
    with torch.no_grad():
        return vae.decode(z0).cpu().numpy()


def benchmark_speedup(state: TrainerState, images: np.ndarray, steps: int = 50,
                      repeats: int = 3) -> dict:
    """Wall-clock comparison: one-step restore vs multi-step teacher sampling
    at identical batch size and resolution."""
    batch = len(images)
    latent_hw = (state.cfg.model.latent_channels,
                 images.shape[2] // state.vae.factor, images.shape[3] // state.vae.factor)
    device = next(state.teacher.parameters()).device
    noise = torch.randn((batch,) + latent_hw,
                        generator=torch.Generator().manual_seed(0)).to(device)
    ctx = np.tile(state.embedder.null_embedding[None], (batch, 1, 1))

    def time_best(fn):
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best

    def one_step():
        with torch.no_grad():
            forward_train(state.bundle, images)

    def multi_step():
        sample_teacher(noise, steps, ctx, state.teacher, state.schedule, state.vae)

    t_student = time_best(one_step)
    t_teacher = time_best(multi_step)
    return {"student_s": t_student, "teacher_s": t_teacher, "steps": steps,
            "batch": batch, "speedup": t_teacher / t_student}
