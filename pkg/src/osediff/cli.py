"""Command-line entry point: degrade, pretrain-vae, pretrain-teacher,
train-osediff, infer, evaluate.

Exit codes: 0 success, 1 user/config error (single-line diagnostic),
2 internal failure (traceback on stderr). Output directories are guarded
by a lock file and all artifacts are written via temp + rename.
"""

import argparse
import contextlib
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import config_to_dict, load_config, write_resolved_config
from .errors import ConfigurationError, DataError, OsediffError
from .images import load_image, save_image
from .metrics import metric_report
from .prompts import make_extractor
from .resize import upsample_bicubic


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


@contextlib.contextmanager
def output_lock(out_dir):
    """Concurrent invocations must not share an output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(
            f"output directory {out} is locked by another run (remove {lock} if stale)")
    try:
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def select_device() -> str:
    """OSD_DEVICE selects cpu or an accelerator index; default cpu."""
    value = os.environ.get("OSD_DEVICE", "cpu").strip().lower()
    if value in ("", "cpu"):
        return "cpu"
    if value.isdigit():
        if not torch.cuda.is_available():
            raise ConfigurationError(f"OSD_DEVICE={value} but no accelerator is available")
        return f"cuda:{value}"
    raise ConfigurationError(f"OSD_DEVICE must be 'cpu' or an accelerator index, got {value!r}")


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)


def _load_pair_images(data_dir):
    from .trainer import load_dataset

    return load_dataset(data_dir)


def cmd_degrade(args) -> int:
    from .degrade import synthesize_dataset

    cfg = load_config(args.config, args.set)
    with output_lock(args.out):
        write_resolved_config(cfg, args.out)
        synthesize_dataset(args.source, args.count, cfg.degrade, args.seed, args.out,
                           size=args.size)
    print(f"wrote {args.count} pairs to {args.out}")
    return 0


def cmd_pretrain_vae(args) -> int:
    from .checkpoint import module_arrays, save_checkpoint
    from .vae import pretrain_vae

    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.train.seed
    data = _load_pair_images(args.data)
    images = data.x_hq
    if cfg.vae_pretrain.include_lq:
        images = np.concatenate([data.x_hq, data.x_lq], axis=0)
    with output_lock(args.out):
        write_resolved_config(cfg, args.out)
        vae, manifest = pretrain_vae(images, cfg.model, cfg.vae_pretrain, seed,
                                     device=select_device(),
                                     log=lambda rec: print(json.dumps(rec)))
        save_checkpoint(Path(args.out) / "ckpt-vae", module_arrays(vae, "vae"),
                        config_to_dict(cfg), manifest)
    print(f"vae holdout psnr {manifest['holdout_psnr']:.2f} dB -> {args.out}/ckpt-vae")
    return 0


def cmd_pretrain_teacher(args) -> int:
    from .checkpoint import load_checkpoint, module_arrays, save_checkpoint
    from .denoiser import pretrain_teacher
    from .prompts import TagEmbedder, texture_tags
    from .schedule import make_schedule
    from .trainer import build_models_from_arrays

    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.train.seed
    arrays, vae_cfg_dict, vae_manifest = load_checkpoint(args.vae)
    vae, _, _ = build_models_from_arrays(arrays, vae_cfg_dict)
    if vae.latent_channels != cfg.model.latent_channels:
        raise ConfigurationError("latent_channels differs between VAE checkpoint and config")
    data = _load_pair_images(args.data)
    tags = [texture_tags(img) for img in data.x_hq]
    schedule = make_schedule(cfg.schedule.timesteps, cfg.schedule.kind,
                             cfg.schedule.beta_start, cfg.schedule.beta_end)
    embedder = TagEmbedder(dim=cfg.model.text_dim)
    with output_lock(args.out):
        write_resolved_config(cfg, args.out)
        model, manifest = pretrain_teacher(
            data.x_hq, tags, vae, schedule, cfg.model, cfg.teacher_pretrain, seed,
            embedder, device=select_device(), log=lambda rec: print(json.dumps(rec)))
        out_arrays = module_arrays(vae, "vae")
        out_arrays.update(module_arrays(model, "denoiser"))
        out_arrays["schedule/alpha"] = schedule.alpha.astype(np.float32)
        out_arrays["schedule/beta"] = schedule.beta.astype(np.float32)
        save_checkpoint(Path(args.out) / "ckpt-teacher", out_arrays, config_to_dict(cfg),
                        {"vae": vae_manifest, **manifest})
    print(f"teacher frechet {manifest['sample_frechet']:.3f} -> {args.out}/ckpt-teacher")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.train.seed
    with output_lock(args.out):
        final = train(cfg, args.data, args.out, seed, teacher_ckpt=args.teacher,
                      resume_from=args.resume, device=select_device(),
                      progress=lambda rec: print(json.dumps(rec)))
    print(f"final checkpoint: {final}")
    return 0


def _input_images(path):
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() == ".png")
        if not files:
            raise DataError(f"no PNG files under {p}")
        return files
    if p.is_file():
        return [p]
    raise DataError(f"input {p} does not exist")


def cmd_infer(args) -> int:
    from .trainer import load_student_bundle

    bundle, cfg_dict, scale = load_student_bundle(
        args.checkpoint, extractor_spec=args.prompt_extractor, merge_lora=args.merge_lora)
    files = _input_images(args.input)
    with output_lock(args.output):
        out = Path(args.output)
        if args.merge_lora:
            from .checkpoint import module_arrays, save_checkpoint
            merged_arrays = module_arrays(bundle.vae, "vae")
            merged_arrays.update(module_arrays(bundle.denoiser, "denoiser"))
            merged_arrays["schedule/alpha"] = bundle.schedule.alpha.astype(np.float32)
            merged_arrays["schedule/beta"] = bundle.schedule.beta.astype(np.float32)
            save_checkpoint(out / "merged-checkpoint", merged_arrays, cfg_dict,
                            {"merged_lora": True, "source": str(args.checkpoint)})
        from .generator import restore

        results = []
        for f in files:
            img = load_image(f)
            if scale > 1:
                img = np.clip(upsample_bicubic(img, scale), -1.0, 1.0).astype(np.float32)
            save_image(out / f.name, restore(img, bundle))
            results.append(f.name)
        _write_json(out / "manifest.json", {
            "checkpoint": str(args.checkpoint), "inputs": results,
            "prompt_extractor": bundle.extractor.name, "merged_lora": bool(args.merge_lora),
            "pre_upsample_scale": scale,
        })
    print(f"restored {len(files)} image(s) -> {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    pred_files = {f.name: f for f in _input_images(args.pred)}
    ref_files = {f.name: f for f in _input_images(args.ref)}
    common = sorted(set(pred_files) & set(ref_files))
    if not common:
        raise DataError("no common file names between --pred and --ref")
    preds = np.stack([load_image(pred_files[n]) for n in common])
    refs = np.stack([load_image(ref_files[n]) for n in common])
    vae = None
    if args.vae_checkpoint:
        from .trainer import build_models_from_arrays

        arrays, cfg_dict, _ = ckpt.load_checkpoint(args.vae_checkpoint)
        vae, _, _ = build_models_from_arrays(arrays, cfg_dict)
    report = metric_report(preds, refs, names=common, vae=vae)
    report["pred"] = str(args.pred)
    report["ref"] = str(args.ref)
    _write_json(args.out, report)
    print(f"psnr {report['psnr_mean']:.2f} dB  ssim {report['ssim_mean']:.4f}"
          + (f"  toy-frechet {report['toy_frechet']:.4f}" if report["toy_frechet"] is not None
             else ""))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="osediff",
                     description="One-step diffusion distillation for super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_data=True):
        p.add_argument("--config", default=None, help="JSON config file (defaults if omitted)")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset directory (degrade output)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key config override, e.g. train.lambda2=0")

    p = sub.add_parser("degrade", help="synthesize LQ-HQ training pairs")
    p.add_argument("--source", required=True, help="HQ image directory or 'procedural'")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32, help="procedural HQ image size")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("pretrain-vae", help="pretrain the toy VAE")
    add_common(p)
    p.set_defaults(func=cmd_pretrain_vae)

    p = sub.add_parser("pretrain-teacher", help="pretrain the teacher denoiser")
    add_common(p)
    p.add_argument("--vae", required=True, help="VAE checkpoint directory")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("train-osediff", help="distill the one-step student")
    add_common(p)
    p.add_argument("--teacher", default=None, help="teacher checkpoint directory")
    p.add_argument("--resume", default=None, help="resume from a student checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore LQ images with a trained student")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--output", required=True)
    p.add_argument("--prompt-extractor", default=None,
                   help="null | tag-stub | cmd:<exe> (default: checkpoint's)")
    p.add_argument("--merge-lora", action="store_true",
                   help="fuse adapters into base weights and export them")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/toy-Frechet report for two directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--vae-checkpoint", default=None,
                   help="checkpoint providing the toy-Frechet featurizer")
    p.set_defaults(func=cmd_evaluate)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OsediffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
