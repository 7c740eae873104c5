"""Checkpoint container: a zip archive holding ``manifest.json`` plus one raw
little-endian float32 buffer per tensor under ``tensors/<name>.bin``.

Manifest layout::

    {"format": "antidiff-checkpoint", "version": 1,
     "model_config": {...} | null,
     "tensors": [{"name", "shape", "dtype": "<f4", "group", "file"}, ...],
     "meta": {...}}
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ToyLDM, parameter_group

FORMAT = "antidiff-checkpoint"
VERSION = 1
DTYPE = "<f4"
# fixed entry timestamp so identical tensors give byte-identical archives
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def write_tensors(
    path: str | Path,
    tensors: dict[str, tuple[str, torch.Tensor]],
    model_config: dict | None = None,
    meta: dict | None = None,
) -> None:
    """``tensors`` maps name -> (group, tensor)."""
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, (group, tensor) in tensors.items():
            arr = tensor.detach().cpu().numpy().astype(DTYPE)
            file = f"tensors/{name}.bin"
            zf.writestr(zipfile.ZipInfo(file, _EPOCH), arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE, "group": group, "file": file})
        manifest = {"format": FORMAT, "version": VERSION, "model_config": model_config, "tensors": entries, "meta": meta or {}}
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), json.dumps(manifest, indent=2, sort_keys=True))


def read_tensors(path: str | Path) -> tuple[dict, dict[str, tuple[str, torch.Tensor]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path} is not a checkpoint archive") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no manifest.json") from None
        if manifest.get("format") != FORMAT or "version" not in manifest:
            raise CheckpointError(f"{path}: not an {FORMAT} manifest")
        if manifest["version"] != VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest['version']}")
        out = {}
        for entry in manifest["tensors"]:
            if entry["dtype"] != DTYPE:
                raise CheckpointError(f"unsupported dtype {entry['dtype']!r} for {entry['name']}")
            arr = np.frombuffer(zf.read(entry["file"]), dtype=DTYPE)
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"{entry['name']}: buffer size does not match shape {shape}")
            out[entry["name"]] = (entry["group"], torch.from_numpy(arr.reshape(shape).astype(np.float32)))
    return manifest, out


def save_model(model: ToyLDM, path: str | Path, meta: dict | None = None) -> None:
    tensors = {name: (parameter_group(name), t) for name, t in model.state_dict().items()}
    write_tensors(path, tensors, model_config=model.cfg.to_dict(), meta=meta)


def load_model(path: str | Path) -> ToyLDM:
    manifest, tensors = read_tensors(path)
    if manifest.get("model_config") is None:
        raise CheckpointError(f"{path} holds no model")
    model = ToyLDM(ModelConfig.from_dict(manifest["model_config"]))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
    for name, (_, t) in tensors.items():
        if name not in state:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} != model {tuple(state[name].shape)}")
    model.load_state_dict({name: t for name, (_, t) in tensors.items()})
    return model


def save_embedding(f: torch.Tensor, path: str | Path, meta: dict | None = None) -> None:
    write_tensors(path, {"prompt.embedding": ("prompt", f)}, meta=meta)


def load_embedding(path: str | Path) -> torch.Tensor:
    _, tensors = read_tensors(path)
    try:
        group, f = tensors["prompt.embedding"]
    except KeyError:
        raise CheckpointError(f"{path} holds no prompt embedding") from None
    if group != "prompt":
        raise CheckpointError(f"prompt embedding stored under group {group!r}")
    return f
