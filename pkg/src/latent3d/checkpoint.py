"""Checkpoint directories.

Layout::

    <dir>/manifest.json          version, config hash, step, configs, tensor index
    <dir>/vlm/<param>.npy        one little-endian array per model tensor
    <dir>/projector/<param>.npy  projector tensors (frozen separately in stage 2)
    <dir>/optim/...              optimizer moments, only when saved for resuming
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import torch

from .errors import IoFailure, MissingComponent

FORMAT = "latent3d-checkpoint/1"


def _le(a: np.ndarray) -> np.ndarray:
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def tensor_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_hash(dict(module.state_dict()))


def optimizer_tensors(opt: torch.optim.Optimizer, names: list[str]) -> dict[str, torch.Tensor]:
    """Flatten an Adam-family optimizer's per-parameter state under parameter names."""
    sd = opt.state_dict()
    out = {}
    for idx, name in enumerate(names):
        for key, val in sd["state"].get(idx, {}).items():
            out[f"{name}/{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return out


def load_optimizer_tensors(opt: torch.optim.Optimizer, names: list[str], tensors: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, name in enumerate(names):
        entry = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            full = f"{name}/{key}"
            if full in tensors:
                entry[key] = torch.from_numpy(np.array(tensors[full]))
        if entry:
            state[idx] = entry
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(
    path,
    model: torch.nn.Module,
    projector: torch.nn.Module | None,
    manifest: dict,
    optim: dict[str, torch.Tensor] | None = None,
) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tensors: dict[str, torch.Tensor] = {f"vlm/{k}": v for k, v in model.state_dict().items()}
    if projector is not None:
        tensors.update({f"projector/{k}": v for k, v in projector.state_dict().items()})
    if optim:
        tensors.update({f"optim/{k}": v for k, v in optim.items()})
    index = {}
    try:
        for name, t in tensors.items():
            arr = _le(t.detach().cpu().numpy())
            f = tmp / (name + ".npy")
            f.parent.mkdir(parents=True, exist_ok=True)
            np.save(f, arr, allow_pickle=False)
            index[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape)}
        full = dict(manifest)
        full.update(
            {
                "format": FORMAT,
                "has_projector": projector is not None,
                "vlm_hash": module_hash(model),
                "projector_hash": module_hash(projector) if projector is not None else None,
                "tensors": index,
            }
        )
        (tmp / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    try:
        m = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"cannot read checkpoint manifest {p}: {e}") from e
    if m.get("format") != FORMAT:
        raise IoFailure(f"{p}: unsupported checkpoint format {m.get('format')!r}")
    return m


def load_tensors(path, prefix: str) -> dict[str, np.ndarray]:
    path = Path(path)
    m = read_manifest(path)
    out = {}
    for name in m["tensors"]:
        if name.startswith(prefix + "/"):
            out[name[len(prefix) + 1 :]] = np.load(path / (name + ".npy"), allow_pickle=False)
    return out


def load_module(module: torch.nn.Module, path, prefix: str) -> None:
    arrays = load_tensors(path, prefix)
    if not arrays:
        raise MissingComponent(f"checkpoint {path} has no {prefix!r} tensors")
    ref = module.state_dict()
    state = {k: torch.from_numpy(np.array(v)).to(ref[k].dtype) for k, v in arrays.items()}
    module.load_state_dict(state)
