"""Image value conversions and PNG I/O.

Internally an image is a float tensor of shape (3, R, R) with values in
[-1, 1]. Conversion to 8-bit RGB happens only when touching files.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError, PersistenceError


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    arr = (image.detach().cpu().double().clamp(-1, 1) + 1.0) * 127.5
    return np.rint(arr.numpy()).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) array, got {arr.shape}")
    t = torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1).copy())
    return t / 127.5 - 1.0


def save_png(image: torch.Tensor, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # no timestamps or text chunks: identical pixels give identical bytes
        Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


def load_png(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return from_uint8(arr)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensor_sha256(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().to(torch.float32).contiguous().numpy().tobytes()).hexdigest()


def quantize(images: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8-bit without touching disk."""
    return torch.round((images.clamp(-1, 1) + 1.0) * 127.5) / 127.5 - 1.0
