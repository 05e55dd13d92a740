"""Session-scoped tiny pipeline shared across test modules: a procedural
dataset at 16x16, a pretrained toy VAE, a pretrained teacher, and a
trainer state built from the teacher checkpoint."""

import numpy as np
import pytest
import torch

from osediff.checkpoint import module_arrays, save_checkpoint
from osediff.config import RootConfig, load_config
from osediff.degrade import synthesize_dataset
from osediff.denoiser import pretrain_teacher
from osediff.prompts import TagEmbedder, texture_tags
from osediff.schedule import make_schedule
from osediff.trainer import init_trainer, load_dataset
from osediff.vae import pretrain_vae

TINY_OVERRIDES = [
    "model.vae_width=16",
    "model.denoiser_width=16",
    "model.temb_dim=32",
    "model.text_dim=16",
    "schedule.timesteps=50",
    "vae_pretrain.epochs=24",
    "vae_pretrain.lr=0.002",
    "vae_pretrain.batch=16",
    "vae_pretrain.psnr_floor=20",
    "vae_pretrain.holdout_fraction=0.15",
    "teacher_pretrain.epochs=4",
    "teacher_pretrain.steps_per_epoch=40",
    "teacher_pretrain.batch=16",
    "teacher_pretrain.lr=0.003",
    "teacher_pretrain.frechet_floor=50",
    "teacher_pretrain.sample_steps=20",
    "teacher_pretrain.sample_count=24",
    "train.batch=4",
    "train.iterations=3",
    "train.checkpoint_every=0",
    "train.holdout_fraction=0.15",
]


@pytest.fixture(scope="session")
def tiny_cfg() -> RootConfig:
    return load_config(None, TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("pairs")
    synthesize_dataset("procedural", 48, tiny_cfg.degrade, seed=5, out_dir=out, size=16)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return load_dataset(tiny_data_dir)


@pytest.fixture(scope="session")
def tiny_vae(tiny_dataset, tiny_cfg):
    images = np.concatenate([tiny_dataset.x_hq, tiny_dataset.x_lq], axis=0)
    return pretrain_vae(images, tiny_cfg.model, tiny_cfg.vae_pretrain, seed=1)


@pytest.fixture(scope="session")
def tiny_schedule(tiny_cfg):
    s = tiny_cfg.schedule
    return make_schedule(s.timesteps, s.kind, s.beta_start, s.beta_end)


@pytest.fixture(scope="session")
def tiny_embedder(tiny_cfg):
    return TagEmbedder(dim=tiny_cfg.model.text_dim)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_dataset, tiny_vae, tiny_schedule, tiny_cfg, tiny_embedder):
    vae, _ = tiny_vae
    tags = [texture_tags(img) for img in tiny_dataset.x_hq]
    return pretrain_teacher(tiny_dataset.x_hq, tags, vae, tiny_schedule, tiny_cfg.model,
                            tiny_cfg.teacher_pretrain, seed=2, embedder=tiny_embedder)


@pytest.fixture(scope="session")
def tiny_teacher_ckpt(tmp_path_factory, tiny_cfg, tiny_vae, tiny_teacher, tiny_schedule):
    from osediff.config import config_to_dict

    vae, vae_manifest = tiny_vae
    teacher, teacher_manifest = tiny_teacher
    out = tmp_path_factory.mktemp("teacher") / "ckpt-teacher"
    arrays = module_arrays(vae, "vae")
    arrays.update(module_arrays(teacher, "denoiser"))
    arrays["schedule/alpha"] = tiny_schedule.alpha.astype(np.float32)
    arrays["schedule/beta"] = tiny_schedule.beta.astype(np.float32)
    save_checkpoint(out, arrays, config_to_dict(tiny_cfg),
                    {"vae": vae_manifest, **teacher_manifest})
    return out


@pytest.fixture()
def tiny_state(tiny_cfg, tiny_teacher_ckpt):
    """Fresh trainer state per test (tests mutate it)."""
    return init_trainer(tiny_cfg, tiny_teacher_ckpt, seed=3)


@pytest.fixture()
def torch_seeded():
    torch.manual_seed(0)
    return torch.Generator().manual_seed(0)
