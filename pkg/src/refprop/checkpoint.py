"""Checkpoint container: a zip of named little-endian float32 arrays.

Layout inside the npz archive:

    __meta__              uint8-encoded JSON header (format version, config
                          echo, parameter shapes, step/epoch, numpy RNG state)
    param/<name>          model parameters and buffers, float32
    opt/<name>/exp_avg    AdamW first moment, float32
    opt/<name>/exp_avg_sq AdamW second moment, float32
    opt/<name>/step       AdamW per-parameter step counter
    rng/torch             torch global RNG state bytes

Loading refuses unknown format versions and reports the first parameter
whose shape disagrees with the model being restored.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    meta: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, dict[str, np.ndarray]]
    torch_rng: np.ndarray | None


def save_checkpoint(
    path,
    model: torch.nn.Module,
    config_dict: dict,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    epoch: int = 0,
    numpy_rng: np.random.Generator | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays[f"param/{name}"] = arr
        shapes[name] = list(arr.shape)

    opt_names = []
    if optimizer is not None:
        id_to_name = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = id_to_name[id(p)]
                opt_names.append(name)
                arrays[f"opt/{name}/exp_avg"] = state["exp_avg"].cpu().numpy().astype("<f4")
                arrays[f"opt/{name}/exp_avg_sq"] = (
                    state["exp_avg_sq"].cpu().numpy().astype("<f4")
                )
                step_val = state["step"]
                step_val = float(step_val.item()) if torch.is_tensor(step_val) else float(step_val)
                arrays[f"opt/{name}/step"] = np.asarray(step_val, dtype="<f4")

    meta = {
        "format_version": FORMAT_VERSION,
        "config": config_dict,
        "step": int(step),
        "epoch": int(epoch),
        "param_shapes": shapes,
        "optimizer_params": opt_names,
        "numpy_rng": numpy_rng.bit_generator.state if numpy_rng is not None else None,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    arrays["rng/torch"] = torch.get_rng_state().numpy()

    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint container: {path}") from exc
    with archive:
        if "__meta__" not in archive:
            raise CheckpointError(f"{path} has no format header")
        try:
            meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path} has a corrupt format header") from exc
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})"
            )
        params = {}
        optimizer: dict[str, dict[str, np.ndarray]] = {}
        torch_rng = None
        for key in archive.files:
            if key.startswith("param/"):
                params[key[len("param/") :]] = archive[key]
            elif key.startswith("opt/"):
                # parameter names contain dots, never slashes
                _, name, slot = key.split("/", 2)
                optimizer.setdefault(name, {})[slot] = archive[key]
            elif key == "rng/torch":
                torch_rng = archive[key]
    return CheckpointData(meta=meta, params=params, optimizer=optimizer, torch_rng=torch_rng)


def restore_model(model: torch.nn.Module, ckpt: CheckpointData) -> None:
    """Copy checkpoint parameters into the model, checking names and shapes."""
    state = model.state_dict()
    for name, tensor in state.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = ckpt.params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(tensor.shape)}"
            )
    with torch.no_grad():
        for name, tensor in state.items():
            tensor.copy_(torch.from_numpy(ckpt.params[name].copy()).to(tensor.dtype))
    model.load_state_dict(state)


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: torch.nn.Module, ckpt: CheckpointData
) -> None:
    name_to_param = dict(model.named_parameters())
    for name, slots in ckpt.optimizer.items():
        if name not in name_to_param:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        p = name_to_param[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(slots["step"])),
            "exp_avg": torch.from_numpy(slots["exp_avg"].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(slots["exp_avg_sq"].copy()).to(p.dtype),
        }


def restore_rng(ckpt: CheckpointData) -> np.random.Generator | None:
    """Restore torch global RNG; return the restored numpy generator, if any."""
    if ckpt.torch_rng is not None:
        torch.set_rng_state(torch.from_numpy(ckpt.torch_rng.copy()))
    state = ckpt.meta.get("numpy_rng")
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
