"""Config schema, loading, and validation.

The config file is a JSON document with one section per pipeline stage.
Every field has a default (the training recipe's published values where
they exist), unknown keys are rejected by name, and dotted-key overrides
are applied over the file before validation. Every run writes the fully
resolved config next to its outputs.
"""

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .degrade import DegradationConfig
from .denoiser import DEFAULT_CFG_SCALE, NEGATIVE_PROMPT
from .errors import ConfigurationError


@dataclass
class ModelConfig:
    latent_channels: int = 4
    vae_width: int = 32
    denoiser_width: int = 64
    denoiser_mult: tuple[int, ...] = (1, 2)
    temb_dim: int = 128
    text_dim: int = 32
    attn_heads: int = 2
    lora_rank: int = 4
    lora_scale: float = 1.0


@dataclass
class ScheduleConfig:
    timesteps: int = 1000
    kind: str = "linear-variance"
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class VaePretrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 32
    kl_weight: float = 1e-6
    psnr_floor: float = 28.0
    holdout_fraction: float = 0.1
    include_lq: bool = True


@dataclass
class TeacherPretrainConfig:
    epochs: int = 12
    steps_per_epoch: int = 0  # 0: one pass over the training split per epoch
    batch: int = 32
    lr: float = 2e-3
    prompt_dropout: float = 0.1
    holdout_fraction: float = 0.1
    frechet_floor: float = 10.0
    sample_steps: int = 50
    sample_count: int = 64


@dataclass
class TrainConfig:
    lambda1: float = 2.0
    lambda2: float = 1.0
    lr: float = 5e-5
    batch: int = 16
    iterations: int = 600
    weight_decay: float = 0.01
    cfg_scale: float = DEFAULT_CFG_SCALE
    negative_prompt: str = NEGATIVE_PROMPT
    vsd_t_min: int = 0  # 0: floor(0.02 T)
    vsd_t_max: int = 0  # 0: floor(0.98 T)
    reg_t_min: int = 1
    reg_t_max: int = 0  # 0: T
    grad_clip: float = 1.0
    grad_clip_enabled: bool = True
    checkpoint_every: int = 200
    holdout_fraction: float = 0.1
    prompt_extractor: str = "tag-stub"
    cfg_on_finetuned_reg: bool = False
    vsd_weighting: str = "dmd"
    omega_norm: str = "l1"
    seed: int = 0


@dataclass
class RootConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    vae_pretrain: VaePretrainConfig = field(default_factory=VaePretrainConfig)
    teacher_pretrain: TeacherPretrainConfig = field(default_factory=TeacherPretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    degrade: DegradationConfig = field(default_factory=DegradationConfig)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            elem_types = [args[0]] * len(value)
        elif origin is tuple:
            if len(value) != len(args):
                raise ConfigurationError(f"{path}: expected {len(args)} items")
            elem_types = list(args)
        else:
            elem_types = [args[0] if args else typing.Any] * len(value)
        items = [_coerce(et, v, f"{path}[{i}]") for i, (et, v) in
                 enumerate(zip(elem_types, value))]
        return tuple(items) if origin is tuple else list(items)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(dc_type, data: dict, path: str):
    known = {f.name: f for f in fields(dc_type)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"unknown config key {path}.{key}" if path
                                     else f"unknown config key {key}")
    kwargs = {}
    for name, f in known.items():
        if name in data:
            tp = typing.get_type_hints(dc_type)[name]
            kwargs[name] = _coerce(tp, data[name], f"{path}.{name}" if path else name)
    return dc_type(**kwargs)


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted-key=value pairs (``train.lambda2=0``) over raw config data."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        parts = dotted.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part.isdigit() and isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
                if not isinstance(node, (dict, list)):
                    raise ConfigurationError(f"override {dotted!r} descends into a scalar")
        leaf = parts[-1]
        value = _parse_override_value(raw.strip())
        if leaf.isdigit() and isinstance(node, list):
            node[int(leaf)] = value
        else:
            node[leaf] = value
    return data


def _deep_merge(base, update):
    for key, val in update.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], val)
        else:
            base[key] = val
    return base


def load_config(path=None, overrides=()) -> RootConfig:
    """Load and validate a config file; missing path means all defaults.

    File values and dotted-key overrides are applied over the materialized
    defaults, so overrides can reach into nested structures (degradation
    stages) that the file never mentions.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {p} must hold a JSON object")
    # JSON round-trip normalizes the defaults' tuples to lists so overrides
    # can index into them.
    defaults = json.loads(json.dumps(dataclasses.asdict(RootConfig())))
    merged = _deep_merge(defaults, data)
    merged = apply_overrides(merged, overrides)
    return _build(RootConfig, merged, "")


def config_to_dict(cfg: RootConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_resolved_config(cfg: RootConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
