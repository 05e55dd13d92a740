"""Directory checkpoint format.

A checkpoint is a directory holding ``weights/`` (one little-endian
float32 binary file per named array, plus ``index.json`` with names and
shapes), ``config.json`` (resolved config echo), and ``manifest.json``.
Writes are atomic (temp directory + rename) and load-then-save is
byte-stable.
"""

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, DataError


def _array_path(name: str) -> str:
    if name.startswith("/") or ".." in name.split("/"):
        raise ConfigurationError(f"bad array name {name!r}")
    return name + ".bin"


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict, manifest: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp-", dir=path.parent))
    try:
        weights = tmp / "weights"
        index = {}
        for name in sorted(arrays):
            arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
            rel = _array_path(name)
            dest = weights / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(arr.tobytes())
            index[name] = {"shape": list(arr.shape), "dtype": "<f4", "file": rel}
        (weights / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        (tmp / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    path = Path(path)
    index_file = path / "weights" / "index.json"
    if not index_file.is_file():
        raise DataError(f"{path} is not a checkpoint directory (missing weights/index.json)")
    index = json.loads(index_file.read_text())
    arrays = {}
    for name, meta in index.items():
        raw = (path / "weights" / meta["file"]).read_bytes()
        arrays[name] = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
    config = json.loads((path / "config.json").read_text())
    manifest = json.loads((path / "manifest.json").read_text())
    return arrays, config, manifest


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{key}": val.detach().cpu().numpy().astype(np.float32)
            for key, val in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str):
    state = {}
    for key, val in module.state_dict().items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise DataError(f"checkpoint is missing array {name!r}")
        state[key] = torch.from_numpy(
            np.asarray(arrays[name], dtype=np.float32).reshape(tuple(val.shape)))
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, named_params, prefix: str
                     ) -> dict[str, np.ndarray]:
    """Adam moment/step state as named float32 arrays (params listed by name)."""
    out = {}
    for name, param in named_params:
        state = opt.state.get(param)
        if not state:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            val = state[key]
            arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
            out[f"{prefix}/{name}.{key}"] = arr.astype(np.float32)
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, named_params,
                          arrays: dict[str, np.ndarray], prefix: str):
    for name, param in named_params:
        key = f"{prefix}/{name}.step"
        if key not in arrays:
            continue
        opt.state[param] = {
            "step": torch.from_numpy(np.asarray(arrays[key], dtype=np.float32).reshape(())),
            "exp_avg": torch.from_numpy(
                np.asarray(arrays[f"{prefix}/{name}.exp_avg"], dtype=np.float32)
                .reshape(tuple(param.shape))),
            "exp_avg_sq": torch.from_numpy(
                np.asarray(arrays[f"{prefix}/{name}.exp_avg_sq"], dtype=np.float32)
                .reshape(tuple(param.shape))),
        }
