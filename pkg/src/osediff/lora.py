"""Low-rank adapters: the only trainable parameters of the student and of
the finetuned regularizer.

An adapter wraps a frozen linear or conv map and adds ``scale * B @ A``
on top; B starts at zero so an injected model is exactly the base model.
Adapters can be merged back into the base weights for export, and the
injected set is the unit of checkpointing and optimizer ownership.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

OWNER_GENERATOR = "generator-theta"
OWNER_REGULARIZER = "regularizer-phi-prime"


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        d_in, d_out = base.in_features, base.out_features
        if rank > min(d_in, d_out):
            raise ConfigurationError(
                f"rank {rank} exceeds min({d_in}, {d_out}) for a {d_out}x{d_in} linear map")
        self.base = base
        self.rank, self.scale = rank, scale
        self.d_in, self.d_out = d_in, d_out
        a = torch.empty(rank, d_in)
        a.normal_(0.0, 1.0 / rank, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        return self.base(x) + self.scale * nn.functional.linear(
            nn.functional.linear(x, self.lora_A), self.lora_B)

    def merged_base(self) -> nn.Linear:
        fused = copy.deepcopy(self.base)
        with torch.no_grad():
            fused.weight += self.scale * self.lora_B @ self.lora_A
        return fused


class LoraConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scale: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        if base.groups != 1:
            raise ConfigurationError("grouped convolutions cannot take adapters")
        k = base.kernel_size[0]
        d_in = base.in_channels * k * base.kernel_size[1]
        d_out = base.out_channels
        if rank > min(d_in, d_out):
            raise ConfigurationError(
                f"rank {rank} exceeds min({d_in}, {d_out}) for conv {base}")
        self.base = base
        self.rank, self.scale = rank, scale
        self.d_in, self.d_out = d_in, d_out
        a = torch.empty(rank, base.in_channels, *base.kernel_size)
        a.normal_(0.0, 1.0 / rank, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, 1, 1))

    def forward(self, x):
        down = nn.functional.conv2d(x, self.lora_A, stride=self.base.stride,
                                    padding=self.base.padding, dilation=self.base.dilation)
        return self.base(x) + self.scale * nn.functional.conv2d(down, self.lora_B)

    def merged_base(self) -> nn.Conv2d:
        fused = copy.deepcopy(self.base)
        rank = self.rank
        delta = (self.lora_B.reshape(self.d_out, rank) @ self.lora_A.reshape(rank, -1))
        with torch.no_grad():
            fused.weight += self.scale * delta.reshape(fused.weight.shape)
        return fused


_LORA_TYPES = (LoraLinear, LoraConv2d)


@dataclass
class AdapterSet:
    """Mapping from target identifiers to adapter layers, owned by one role."""

    owner: str
    rank: int
    scale: float
    layers: dict[str, nn.Module] = field(default_factory=dict)

    def parameters(self):
        for layer in self.layers.values():
            yield layer.lora_A
            yield layer.lora_B

    def named_parameters(self):
        for name, layer in self.layers.items():
            yield f"{name}.lora_A", layer.lora_A
            yield f"{name}.lora_B", layer.lora_B

    def parameter_count(self) -> int:
        return sum(layer.rank * (layer.d_in + layer.d_out) for layer in self.layers.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.detach().numpy().astype(np.float32)
                for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name not in arrays:
                    raise ConfigurationError(f"checkpoint is missing adapter array {name!r}")
                p.copy_(torch.from_numpy(np.asarray(arrays[name], dtype=np.float32)
                                         .reshape(tuple(p.shape))))


def _named_module_map(model: nn.Module) -> dict[str, nn.Module]:
    return dict(model.named_modules())


def _set_submodule(model: nn.Module, path: str, new: nn.Module):
    parts = path.split(".")
    parent = model
    for p in parts[:-1]:
        parent = getattr(parent, p)
    setattr(parent, parts[-1], new)


def default_targets(model: nn.Module) -> list[str]:
    """All attention-block linear maps plus every 1x1/3x3 convolution."""
    from .nets import CrossAttention

    names = []
    modules = _named_module_map(model)
    for name, mod in modules.items():
        if isinstance(mod, nn.Conv2d) and mod.kernel_size[0] in (1, 3) \
                and mod.kernel_size[0] == mod.kernel_size[1]:
            names.append(name)
        elif isinstance(mod, nn.Linear):
            parent = name.rsplit(".", 1)[0] if "." in name else ""
            if isinstance(modules.get(parent), CrossAttention):
                names.append(name)
    return names


def inject(model: nn.Module, targets, rank: int, scale: float = 1.0,
           owner: str = OWNER_GENERATOR, generator: torch.Generator | None = None,
           prefix: str = "") -> AdapterSet:
    """Wrap the target maps of a (frozen) model with zero-initialized adapters.

    Target names are module paths within ``model``; ``prefix`` namespaces
    them in the returned set so adapters from several submodels can share
    one AdapterSet.
    """
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    adapters = AdapterSet(owner=owner, rank=rank, scale=scale)
    modules = _named_module_map(model)
    for target in targets:
        mod = modules.get(target)
        if mod is None:
            raise ConfigurationError(f"unknown adapter target {target!r}")
        if isinstance(mod, _LORA_TYPES):
            raise ConfigurationError(f"target {target!r} already has an adapter")
        if isinstance(mod, nn.Linear):
            wrapped = LoraLinear(mod, rank, scale, generator)
        elif isinstance(mod, nn.Conv2d):
            wrapped = LoraConv2d(mod, rank, scale, generator)
        else:
            raise ConfigurationError(
                f"target {target!r} is a {type(mod).__name__}, not a linear/conv map")
        _set_submodule(model, target, wrapped)
        key = f"{prefix}{target}"
        if key in adapters.layers:
            raise ConfigurationError(f"duplicate adapter target {key!r}")
        adapters.layers[key] = wrapped
    return adapters


def combine(*sets: AdapterSet) -> AdapterSet:
    """Union of adapter sets sharing owner/rank/scale (encoder + denoiser -> theta)."""
    first = sets[0]
    merged = AdapterSet(owner=first.owner, rank=first.rank, scale=first.scale)
    for s in sets:
        if (s.owner, s.rank, s.scale) != (first.owner, first.rank, first.scale):
            raise ConfigurationError("cannot combine adapter sets with different settings")
        for key, layer in s.layers.items():
            if key in merged.layers:
                raise ConfigurationError(f"duplicate adapter target {key!r}")
            merged.layers[key] = layer
    return merged


def merge(adapters: AdapterSet, model: nn.Module, prefix: str = "") -> nn.Module:
    """Fuse adapter deltas into a deep copy of the model (no adapters remain).

    ``adapters`` must be the set that was injected over this model;
    anything else is a configuration error.
    """
    modules = _named_module_map(model)
    fused = copy.deepcopy(model)
    seen = 0
    for key, layer in adapters.layers.items():
        if not key.startswith(prefix):
            continue
        target = key[len(prefix):]
        if modules.get(target) is not layer:
            raise ConfigurationError(
                f"adapter {key!r} was not injected over this model (mismatched bases)")
        _set_submodule(fused, target, layer.merged_base())
        seen += 1
    expected = sum(1 for k in adapters.layers if k.startswith(prefix))
    if seen != expected:
        raise ConfigurationError("adapter set does not match the given model")
    return fused


def model_trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
