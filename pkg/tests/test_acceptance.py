"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to watch the lines as they
come. The end-to-end pipeline (dataset synthesis, VAE pretrain, teacher
pretrain, distillation) runs once as a module fixture off the checked-in
``configs/toy-32.json`` recipe and is shared by the later criteria.
"""

import copy
import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from osediff.checkpoint import load_checkpoint, module_arrays, save_checkpoint
from osediff.config import config_to_dict, load_config
from osediff.degrade import synthesize_dataset
from osediff.denoiser import (DEFAULT_CFG_SCALE, NEGATIVE_PROMPT, Denoiser, cfg_predict,
                              predict_noise, pretrain_teacher)
from osediff.generator import restore
from osediff.lora import default_targets, inject, merge
from osediff.metrics import PSNR_CAP_DB, psnr, ssim, toy_frechet
from osediff.prompts import TagEmbedder, texture_tags
from osediff.schedule import forward_diffuse, make_schedule, one_step_denoise
from osediff.trainer import (benchmark_speedup, init_trainer, load_dataset,
                             load_student_bundle, train, train_step)
from osediff.vae import ToyVAE, pretrain_vae
from osediff.vsd import reg_gradient, regularizer_loss, vsd_gradient_terms

RECIPE = Path(__file__).resolve().parent.parent / "configs" / "toy-32.json"
DATASET_SEED = 17
DATASET_SIZE = 240
RUN_SEED = 3


def _line(n, ok, text):
    print(f"\n[ACCEPTANCE] criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {text}")


class _Pipeline:
    def __init__(self, root):
        self.root = Path(root)
        self.cfg = load_config(RECIPE)
        self.pairs = self.root / "pairs"
        synthesize_dataset("procedural", DATASET_SIZE, self.cfg.degrade, DATASET_SEED,
                           self.pairs, size=32)
        self.data = load_dataset(self.pairs)

        images = np.concatenate([self.data.x_hq, self.data.x_lq], axis=0)
        self.vae, self.vae_manifest = pretrain_vae(images, self.cfg.model,
                                                   self.cfg.vae_pretrain, seed=1)
        self.schedule = make_schedule(self.cfg.schedule.timesteps, self.cfg.schedule.kind,
                                      self.cfg.schedule.beta_start,
                                      self.cfg.schedule.beta_end)
        tags = [texture_tags(img) for img in self.data.x_hq]
        self.embedder = TagEmbedder(dim=self.cfg.model.text_dim)
        self.teacher, self.teacher_manifest = pretrain_teacher(
            self.data.x_hq, tags, self.vae, self.schedule, self.cfg.model,
            self.cfg.teacher_pretrain, seed=2, embedder=self.embedder)

        self.teacher_ckpt = self.root / "ckpt-teacher"
        arrays = module_arrays(self.vae, "vae")
        arrays.update(module_arrays(self.teacher, "denoiser"))
        arrays["schedule/alpha"] = self.schedule.alpha.astype(np.float32)
        arrays["schedule/beta"] = self.schedule.beta.astype(np.float32)
        save_checkpoint(self.teacher_ckpt, arrays, config_to_dict(self.cfg),
                        {"vae": self.vae_manifest, **self.teacher_manifest})

        self.run_dir = self.root / "distill"
        self.final_ckpt = train(self.cfg, self.pairs, self.run_dir, RUN_SEED,
                                teacher_ckpt=self.teacher_ckpt)
        _, _, self.final_manifest = load_checkpoint(self.final_ckpt)
        self.bundle, _, _ = load_student_bundle(self.final_ckpt)

    def short_cfg(self, iterations=40, **train_overrides):
        return dataclasses.replace(
            self.cfg, train=dataclasses.replace(self.cfg.train, iterations=iterations,
                                                checkpoint_every=0, **train_overrides))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return _Pipeline(tmp_path_factory.mktemp("toy32-acceptance"))


def test_criterion_1_schedule_algebra():
    rng = np.random.default_rng(0)
    for kind in ("linear-variance", "cosine"):
        s = make_schedule(1000, kind)
        assert np.max(np.abs(s.alpha**2 + s.beta**2 - 1.0)) <= 1e-6
    s = make_schedule(1000, "linear-variance")
    for _ in range(1000):
        t = int(rng.integers(1, 1001))
        z = rng.standard_normal((4, 4))
        eps = rng.standard_normal((4, 4))
        back = one_step_denoise(forward_diffuse(z, t, eps, s), eps, t, s)
        assert np.max(np.abs(back - z)) <= 1e-5 * max(1.0, np.max(np.abs(z)))
    _line(1, True, "alpha^2+beta^2=1 (<=1e-6) and 1000 round-trips exact to 1e-5")


def test_criterion_2_lora_equivalences():
    torch.manual_seed(0)
    model = Denoiser(latent_channels=4, width=64, mult=(1, 2), temb_dim=128,
                     text_dim=32, heads=2)
    model.requires_grad_(False)
    g = torch.Generator().manual_seed(1)
    z = torch.randn(100, 4, 8, 8, generator=g)
    c = torch.randn(100, 2, 32, generator=g)
    with torch.no_grad():
        before = model(z, 500, c)
    adapters = inject(model, default_targets(model), rank=4, generator=g)
    with torch.no_grad():
        after = model(z, 500, c)
    assert float(torch.max(torch.abs(after - before))) <= 1e-6

    with torch.no_grad():
        for p in adapters.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    for name, layer in adapters.layers.items():
        fused = layer.merged_base()
        if isinstance(layer.base, nn.Linear):
            x = torch.randn(100, layer.d_in, generator=g)
        else:
            x = torch.randn(100, layer.base.in_channels, 6, 6, generator=g)
        with torch.no_grad():
            diff = torch.max(torch.abs(layer(x) - fused(x)))
        assert float(diff) <= 1e-5, name
    merged = merge(adapters, model)
    with torch.no_grad():
        diff = torch.max(torch.abs(model(z, 500, c) - merged(z, 500, c)))
    assert float(diff) <= 1e-5
    _line(2, True, "zero-init equivalence <=1e-6; merge equivalence <=1e-5, "
                   "100 inputs per target")


class _TinyGenerator(nn.Module):
    """<=100-parameter generator producing 2x4x4 latents."""

    def __init__(self):
        super().__init__()
        self.mix_in = nn.Conv2d(2, 4, 1)
        self.mix_out = nn.Conv2d(4, 2, 1)

    def forward(self, z_l):
        return self.mix_out(torch.tanh(self.mix_in(z_l)))


def test_criterion_3_vsd_gradient_oracle():
    torch.manual_seed(2)
    gen = _TinyGenerator().double()
    n_params = sum(p.numel() for p in gen.parameters())
    assert n_params <= 100

    phi = Denoiser(latent_channels=2, width=8, mult=(1, 2), temb_dim=16, text_dim=8,
                   heads=1).double()
    nn.init.normal_(phi.conv_out.weight, std=0.1)
    nn.init.normal_(phi.conv_out.bias, std=0.1)
    phi_prime = copy.deepcopy(phi)
    with torch.no_grad():
        for p in phi_prime.parameters():
            p.add_(0.02 * torch.randn(p.shape, dtype=torch.float64))
    phi.requires_grad_(False)
    phi_prime.requires_grad_(False)

    schedule = make_schedule(1000, "linear-variance")
    embedder = TagEmbedder(dim=8)
    ctx = torch.from_numpy(embedder.embed(["stripes"])[None]).double()
    c_neg = torch.from_numpy(embedder.null_embedding[None]).double()
    z_l = torch.randn(1, 2, 4, 4, dtype=torch.float64,
                      generator=torch.Generator().manual_seed(3))

    z_hat = gen(z_l)
    rng = np.random.default_rng(4)
    surrogate, rec = reg_gradient(z_hat, ctx, phi, phi_prime, schedule, rng,
                                  cfg_scale=7.5, c_neg=c_neg)
    assert not rec.skipped
    surrogate.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in gen.parameters()])

    # independent oracle: central differences of f(theta) = <v, z_hat(theta)>
    # with v = omega (z_phi' - z_phi) held fixed from the base point
    v = rec.grad.detach()
    h = 1e-6
    fd = torch.zeros_like(analytic)
    k = 0
    for p in gen.parameters():
        flat = p.detach().reshape(-1)
        for i in range(flat.numel()):
            vals = []
            for sign in (+1.0, -1.0):
                with torch.no_grad():
                    flat[i] += sign * h
                    vals.append(float(torch.sum(v * gen(z_l))))
                    flat[i] -= sign * h
            fd[k] = (vals[0] - vals[1]) / (2 * h)
            k += 1
    rel = float(torch.linalg.vector_norm(analytic - fd)
                / torch.linalg.vector_norm(analytic))
    assert rel <= 1e-3

    # weighting identity at several fixed (t, eps)
    probe = np.random.default_rng(5)
    for _ in range(5):
        t = int(probe.integers(1, 1001))
        eps = torch.from_numpy(
            probe.standard_normal((1, 2, 4, 4)).astype(np.float32)).double()
        r = vsd_gradient_terms(z_hat.detach(), ctx, phi, phi_prime, schedule, t, eps,
                               7.5, c_neg)
        a, b = schedule.coeffs(t)
        lhs = r.omega * (r.z_phi_prime - r.z_phi)
        rhs = r.omega * (b / a) * (r.eps_phi_cfg - r.eps_phi_prime)
        assert float(torch.max(torch.abs(lhs - rhs))) <= 1e-6
    _line(3, True, f"finite-difference oracle rel err {rel:.2e} <= 1e-3; "
                   "score-difference identity <= 1e-6")


def test_criterion_4_stop_gradient_and_update_isolation(pipeline):
    from osediff.generator import forward_train

    state = init_trainer(pipeline.cfg, pipeline.teacher_ckpt, seed=7)
    x_l = pipeline.data.x_lq[:4]
    x_h = pipeline.data.x_hq[:4]
    ctx, _, z_hat, _ = forward_train(state.bundle, x_l)
    rng = np.random.default_rng(7)
    surrogate, _ = reg_gradient(z_hat, ctx, state.teacher, state.regularizer,
                                state.schedule, rng, 7.5, state.neg_ctx,
                                state.vsd_t_range())
    surrogate.backward()
    assert all(p.grad is None for p in state.teacher.parameters())
    assert all(p.grad is None for p in state.phi_prime.parameters())

    ctx, _, z_hat, _ = forward_train(state.bundle, x_l)
    loss, _ = regularizer_loss(z_hat.detach(), ctx, state.regularizer, state.schedule,
                               rng)
    state.opt_theta.zero_grad(set_to_none=True)
    loss.backward()
    assert all(p.grad is None for p in state.theta.parameters())
    assert all(p.grad is None for p in state.teacher.parameters())

    # two-phase step mutates exactly the intended parameter sets
    state = init_trainer(pipeline.cfg, pipeline.teacher_ckpt, seed=8)
    teacher_before = {k: v.clone() for k, v in state.teacher.state_dict().items()}
    decoder_before = {k: v.clone() for k, v in state.vae.decoder.state_dict().items()}
    theta_before = [p.detach().clone() for p in state.theta.parameters()]
    phi_before = [p.detach().clone() for p in state.phi_prime.parameters()]
    train_step(state, x_l, x_h, np.random.default_rng(8))
    assert not all(torch.equal(a, b) for a, b in zip(theta_before,
                                                     state.theta.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(phi_before,
                                                     state.phi_prime.parameters()))
    assert all(torch.equal(v, state.teacher.state_dict()[k])
               for k, v in teacher_before.items())
    assert all(torch.equal(v, state.vae.decoder.state_dict()[k])
               for k, v in decoder_before.items())
    _line(4, True, "zero gradients on frozen roles; step mutates only theta then "
                   "only phi-prime")


def test_criterion_5_cfg_identities_and_defaults(pipeline):
    torch.manual_seed(9)
    model = pipeline.teacher
    g = torch.Generator().manual_seed(9)
    z = torch.randn(2, 4, 8, 8, generator=g)
    c1 = torch.randn(2, 3, 32, generator=g)
    c2 = torch.randn(2, 5, 32, generator=g)
    s1 = cfg_predict(z, 500, c1, c2, 1.0, model, pipeline.schedule)
    assert torch.equal(s1, predict_noise(z, 500, c1, model, pipeline.schedule))
    for s in (0.0, 3.0, 7.5):
        same = cfg_predict(z, 500, c1, c1, s, model, pipeline.schedule)
        assert torch.equal(same, predict_noise(z, 500, c1, model, pipeline.schedule))

    resolved = config_to_dict(load_config(None))
    assert resolved["train"]["cfg_scale"] == 7.5
    assert resolved["train"]["negative_prompt"] == NEGATIVE_PROMPT
    assert DEFAULT_CFG_SCALE == 7.5
    _line(5, True, "s=1 and equal-prompt collapses exact; default 7.5 and negative "
                   "prompt in resolved config")


def test_criterion_6_determinism(pipeline, tmp_path):
    # restore: bit-identical reruns
    x_l = pipeline.data.x_lq[0]
    a = restore(x_l, pipeline.bundle)
    b = restore(x_l, pipeline.bundle)
    np.testing.assert_array_equal(a, b)

    # degrade: byte-identical datasets from (seed, config)
    for run in ("d1", "d2"):
        synthesize_dataset("procedural", 6, pipeline.cfg.degrade, 99, tmp_path / run,
                           size=32)
    for rel in ("manifest.json", "hq/0002.png", "lq/0002.png"):
        assert (tmp_path / "d1" / rel).read_bytes() == (tmp_path / "d2" / rel).read_bytes()

    # 10-step training: bit-reproducible and resumable
    cfg10 = pipeline.short_cfg(iterations=10)
    cfg10 = dataclasses.replace(cfg10, train=dataclasses.replace(cfg10.train,
                                                                 checkpoint_every=5))
    final_a = train(cfg10, pipeline.pairs, tmp_path / "t1", seed=31,
                    teacher_ckpt=pipeline.teacher_ckpt)
    final_b = train(cfg10, pipeline.pairs, tmp_path / "t2", seed=31,
                    teacher_ckpt=pipeline.teacher_ckpt)
    arrays_a, _, _ = load_checkpoint(final_a)
    arrays_b, _, _ = load_checkpoint(final_b)
    for name in arrays_a:
        np.testing.assert_array_equal(arrays_a[name], arrays_b[name], err_msg=name)
    final_c = train(cfg10, pipeline.pairs, tmp_path / "t3", seed=31,
                    teacher_ckpt=pipeline.teacher_ckpt,
                    resume_from=tmp_path / "t1" / "ckpt-000005")
    arrays_c, _, _ = load_checkpoint(final_c)
    for name in arrays_a:
        np.testing.assert_array_equal(arrays_a[name], arrays_c[name], err_msg=name)
    _line(6, True, "restore/degrade/train bit-reproducible; resumed 10-step run "
                   "matches uninterrupted")


def test_criterion_7_metric_oracles():
    img = np.clip(np.random.default_rng(0).standard_normal((3, 32, 32)) * 0.4, -1, 1)
    img = img.astype(np.float32)
    assert psnr(img, img) == PSNR_CAP_DB
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    flat = np.zeros((3, 32, 32), dtype=np.float32)
    offset = flat + 32.0 / 255.0  # 16 luma steps on 0..255
    closed_form = 10.0 * np.log10(255.0**2 / 16.0**2)
    assert abs(psnr(flat, offset) - closed_form) <= 0.01
    a = np.array([[-np.sqrt(0.5)], [np.sqrt(0.5)]])
    assert toy_frechet(a, a + 1.0) == pytest.approx(1.0, abs=1e-6)
    b = np.array([[-np.sqrt(2.0)], [np.sqrt(2.0)]])
    assert toy_frechet(a, b) == pytest.approx(1.0, abs=1e-6)
    _line(7, True, f"psnr cap/ssim identity; luma-offset psnr {closed_form:.4f} dB; "
                   "1-D frechet cases = 1.0")


def test_criterion_8_end_to_end_distillation(pipeline):
    hm = pipeline.final_manifest["holdout_metrics"]
    margin = hm["student_psnr"] - hm["baseline_psnr"]
    frechet_ok = hm.get("student_frechet", np.inf) < hm.get("baseline_frechet", -np.inf)
    ok = margin >= 0.5 and frechet_ok
    _line(8, ok, f"student {hm['student_psnr']:.2f} dB vs bicubic "
                 f"{hm['baseline_psnr']:.2f} dB (margin {margin:+.2f}; need >= +0.5); "
                 f"frechet {hm.get('student_frechet', float('nan')):.3f} vs "
                 f"{hm.get('baseline_frechet', float('nan')):.3f}")
    assert margin >= 0.5, (
        "one-step student must beat the bicubic baseline by >= 0.5 dB")
    assert frechet_ok, "student corpus frechet must be below the bicubic baseline's"


def test_criterion_9_speedup(pipeline):
    state = init_trainer(pipeline.cfg, pipeline.teacher_ckpt, seed=12)
    result = benchmark_speedup(state, pipeline.data.x_lq[:8], steps=50, repeats=3)
    ok = result["speedup"] >= 10.0
    _line(9, ok, f"one-step restore {result['student_s'] * 1e3:.0f} ms vs 50-step "
                 f"sampling {result['teacher_s'] * 1e3:.0f} ms "
                 f"({result['speedup']:.1f}x, need >= 10x)")
    assert ok


def test_criterion_10_single_step_audit(pipeline):
    bundle = pipeline.bundle
    for i in range(5):
        before = bundle.denoiser.forward_calls
        restore(pipeline.data.x_lq[i], bundle)
        assert bundle.denoiser.forward_calls - before == 1
    _line(10, True, "exactly one denoiser forward per restore call")


def test_criterion_11_ablation_switches(pipeline, tmp_path):
    def reg_norms(run_dir):
        lines = (Path(run_dir) / "train_log.jsonl").read_text().splitlines()
        return [json.loads(ln)["reg_grad_norm"] for ln in lines]

    train(pipeline.short_cfg(iterations=40, lambda2=0.0), pipeline.pairs,
          tmp_path / "no-vsd", seed=41, teacher_ckpt=pipeline.teacher_ckpt)
    train(pipeline.short_cfg(iterations=40), pipeline.pairs, tmp_path / "default",
          seed=41, teacher_ckpt=pipeline.teacher_ckpt)
    off = sum(reg_norms(tmp_path / "no-vsd"))
    on = sum(reg_norms(tmp_path / "default"))
    assert off == 0.0
    assert off < on

    train(pipeline.short_cfg(iterations=40, prompt_extractor="null"), pipeline.pairs,
          tmp_path / "null-prompt", seed=41, teacher_ckpt=pipeline.teacher_ckpt)
    bundle_tag, _, _ = load_student_bundle(tmp_path / "default" / "ckpt-final")
    bundle_null, _, _ = load_student_bundle(tmp_path / "null-prompt" / "ckpt-final")
    x_l = pipeline.data.x_lq[-1]
    diff = np.max(np.abs(restore(x_l, bundle_tag) - restore(x_l, bundle_null)))
    assert diff > 1e-6
    _line(11, True, f"lambda2=0 run has zero reg gradient (vs {on:.1f} summed norm "
                    f"in default); null vs tag-stub students differ (max |d|={diff:.3f})")
