"""Checkpoint directory format.

A checkpoint is a directory holding ``metadata.json`` plus one raw
little-endian float32 file per named tensor (row-major). The metadata lists
every tensor with its shape so the directory is readable without this
package.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import PersistenceError

FORMAT_VERSION = 1


def _tensor_file(name: str) -> str:
    return name + ".f32"


def save_state(path, state: dict[str, torch.Tensor], metadata: dict) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name, tensor in state.items():
            arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
            arr.astype("<f4", copy=False).tofile(path / _tensor_file(name))
            shapes[name] = list(arr.shape)
        meta = dict(metadata)
        meta["format_version"] = FORMAT_VERSION
        meta["layer_shapes"] = shapes
        (path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_state(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        meta = json.loads((path / "metadata.json").read_text())
        state = {}
        for name, shape in meta["layer_shapes"].items():
            arr = np.fromfile(path / _tensor_file(name), dtype="<f4")
            state[name] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    except (OSError, KeyError, ValueError) as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    return state, meta


def state_hash(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
