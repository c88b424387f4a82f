"""Image ingestion: crop around a face box, resize, normalize."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..errors import InputError
from ..imaging import from_uint8

FULL_FRAME = "full-frame"


@dataclass
class IngestSpec:
    """``box`` is (x, y, width, height) in pixels, or ``"full-frame"``."""

    path: Path
    box: tuple[float, float, float, float] | str = FULL_FRAME
    scale: float = 1.3
    resolution: int = 32

    def __post_init__(self):
        self.path = Path(self.path)
        if self.scale < 1:
            raise InputError(f"crop scale must be >= 1, got {self.scale}")
        if self.box != FULL_FRAME:
            self.box = tuple(float(v) for v in self.box)
            if len(self.box) != 4:
                raise InputError("box must be (x, y, width, height)")


def crop_box(box, scale: float, width: int, height: int) -> tuple[float, float, float, float]:
    """Scale ``box`` about its center and clamp to the image; returns (x0, y0, x1, y1)."""
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise InputError(f"degenerate box {box}")
    cx, cy = x + w / 2, y + h / 2
    half_w, half_h = w * scale / 2, h * scale / 2
    x0, y0 = max(0.0, cx - half_w), max(0.0, cy - half_h)
    x1, y1 = min(float(width), cx + half_w), min(float(height), cy + half_h)
    if x1 <= x0 or y1 <= y0:
        raise InputError(f"box {box} lies outside the {width}x{height} image")
    return x0, y0, x1, y1


def ingest(spec: IngestSpec) -> torch.Tensor:
    """Load, crop and bilinearly resize an image to (3, R, R) in [-1, 1]."""
    try:
        with Image.open(spec.path) as im:
            im = im.convert("RGB")
            im.load()
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {spec.path}: {exc}") from exc
    W, H = im.size
    box = (0.0, 0.0, float(W), float(H)) if spec.box == FULL_FRAME else crop_box(spec.box, spec.scale, W, H)
    R = spec.resolution
    if box == (0.0, 0.0, float(R), float(R)) and (W, H) == (R, R):
        out = im
    else:
        out = im.resize((R, R), Image.BILINEAR, box=box)
    return from_uint8(np.asarray(out))
