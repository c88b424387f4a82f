"""Procedural toy face corpus, target-domain transforms, dataset manifests.

The corpus stands in for a real face collection: each image is a
composition of ellipses (background, hair, face, eyes, mouth) with randomly
drawn colors and geometry. The discrete color classes double as labels for
training the frozen feature extractor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import InputError, PersistenceError
from .imaging import file_sha256, from_uint8, load_png, quantize, save_png, to_uint8

BACKGROUNDS = np.array([
    [0.25, 0.35, 0.55], [0.55, 0.60, 0.50], [0.70, 0.70, 0.72], [0.35, 0.25, 0.30],
])
SKIN_TONES = np.array([[0.95, 0.80, 0.68], [0.80, 0.60, 0.45], [0.50, 0.35, 0.25]])
HAIR_COLORS = np.array([[0.10, 0.08, 0.06], [0.45, 0.30, 0.15], [0.85, 0.72, 0.40]])
ATTRIBUTE_CLASSES = {"background": 4, "skin": 3, "hair": 3}


def _ellipse(xx, yy, cx, cy, ax, ay, soft):
    d = ((xx - cx[:, None, None]) / ax[:, None, None]) ** 2 + ((yy - cy[:, None, None]) / ay[:, None, None]) ** 2
    return np.clip((1.0 - d) / soft + 0.5, 0.0, 1.0)[..., None]


WARM_AXIS = np.array([1.0, 0.2, -1.0])


def render_faces(n: int, resolution: int = 32, seed: int = 0, white_balance: float = 0.1
                 ) -> tuple[torch.Tensor, dict[str, np.ndarray]]:
    """Draw ``n`` faces. Returns images (n, 3, R, R) in [-1, 1] and attribute labels.

    ``white_balance`` is the half-width (in [0, 1] color units) of a uniform
    per-image shift along the warm/cool axis, standing in for natural
    lighting variation.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    ss = 2  # supersampling factor
    size = resolution * ss
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    xx = xx[None]
    yy = yy[None]

    bg_cls = rng.integers(0, 4, n)
    skin_cls = rng.integers(0, 3, n)
    hair_cls = rng.integers(0, 3, n)

    def jitter(base, scale):
        return np.clip(base + rng.normal(0, scale, base.shape), 0, 1)

    bg = jitter(BACKGROUNDS[bg_cls], 0.04)
    skin = jitter(SKIN_TONES[skin_cls], 0.03)
    hair = jitter(HAIR_COLORS[hair_cls], 0.03)
    eye_col = jitter(np.tile([[0.15, 0.2, 0.3]], (n, 1)), 0.05)
    mouth_col = jitter(np.tile([[0.7, 0.25, 0.3]], (n, 1)), 0.05)

    cx = 0.5 + rng.normal(0, 0.03, n)
    cy = 0.54 + rng.normal(0, 0.03, n)
    fw = rng.uniform(0.24, 0.32, n)
    fh = fw * rng.uniform(1.15, 1.35, n)
    soft = 2.0 / size / 0.25

    img = np.broadcast_to(bg[:, None, None, :], (n, size, size, 3)).copy()
    # vertical background gradient
    img *= (1.0 - 0.15 * yy)[..., None]

    hair_m = _ellipse(xx, yy, cx, cy - fh * 0.18, fw * rng.uniform(1.08, 1.25, n), fh * rng.uniform(0.95, 1.1, n), soft)
    img = img * (1 - hair_m) + hair[:, None, None, :] * hair_m
    face_m = _ellipse(xx, yy, cx, cy + fh * 0.05, fw, fh * 0.9, soft)
    img = img * (1 - face_m) + skin[:, None, None, :] * face_m

    eye_dx = fw * rng.uniform(0.35, 0.48, n)
    eye_y = cy - fh * rng.uniform(0.05, 0.18, n)
    eye_r = fw * rng.uniform(0.10, 0.15, n)
    for side in (-1, 1):
        m = _ellipse(xx, yy, cx + side * eye_dx, eye_y, eye_r, eye_r * 0.7, soft)
        img = img * (1 - m) + eye_col[:, None, None, :] * m
    mouth_w = fw * rng.uniform(0.3, 0.5, n)
    m = _ellipse(xx, yy, cx, cy + fh * rng.uniform(0.42, 0.55, n), mouth_w, mouth_w * rng.uniform(0.2, 0.45, n), soft)
    img = img * (1 - m) + mouth_col[:, None, None, :] * m

    img = img.reshape(n, resolution, ss, resolution, ss, 3).mean(axis=(2, 4))
    temperature = rng.uniform(-1.0, 1.0, n) * white_balance
    img = img + temperature[:, None, None, None] * WARM_AXIS
    arr = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    images = torch.from_numpy(arr.transpose(0, 3, 1, 2).astype(np.float32)) / 127.5 - 1.0
    return images, {"background": bg_cls, "skin": skin_cls, "hair": hair_cls}


# -- target-domain transforms -------------------------------------------------

def color_cast(images: torch.Tensor, shift=(0.25, 0.05, -0.25)) -> torch.Tensor:
    shift = torch.as_tensor(shift, dtype=images.dtype).view(-1, 3, 1, 1)
    return (images + shift).clamp(-1, 1).reshape(images.shape)


def gaussian_blur(images: torch.Tensor, sigma: float = 0.8) -> torch.Tensor:
    radius = max(1, int(np.ceil(2.5 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=images.dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    k = k / k.sum()
    batch = images.reshape(-1, 3, *images.shape[-2:])
    pad = F.pad(batch, (radius, radius, radius, radius), mode="replicate")
    out = F.conv2d(pad, k.view(1, 1, 1, -1).repeat(3, 1, 1, 1), groups=3)
    out = F.conv2d(out, k.view(1, 1, -1, 1).repeat(3, 1, 1, 1), groups=3)
    return out.reshape(images.shape)


def jpeg_artifacts(images: torch.Tensor, quality: int = 15) -> torch.Tensor:
    import io

    batch = images.reshape(-1, 3, *images.shape[-2:])
    out = []
    for img in batch:
        buf = io.BytesIO()
        Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        with Image.open(buf) as im:
            out.append(from_uint8(np.asarray(im.convert("RGB"))))
    return torch.stack(out).reshape(images.shape)


def channel_swap(images: torch.Tensor, order=(2, 0, 1)) -> torch.Tensor:
    return images[..., list(order), :, :]


FIXTURES = {
    # color cast + blur: the default one-shot target domain
    "colorcast": lambda x: gaussian_blur(color_cast(x), 0.5),
    "castonly": color_cast,
    "blur": gaussian_blur,
    "jpeg": jpeg_artifacts,
    "channelswap": channel_swap,
}


def apply_fixture(name: str, images: torch.Tensor) -> torch.Tensor:
    try:
        fn = FIXTURES[name]
    except KeyError:
        raise InputError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    return quantize(fn(images))


# -- manifests ----------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class DatasetManifest:
    """A labeled image set on disk: PNG files plus a JSON-lines index.

    Each record carries ``path`` (relative to the manifest directory),
    ``sha256``, ``label``, ``seed``, ``k`` and ``source_model_version``.
    """

    root: Path
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def hashes(self) -> set[str]:
        return {r["sha256"] for r in self.records}

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        return cls(path.parent, [json.loads(line) for line in lines if line.strip()])

    def write(self) -> Path:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w") as fh:
                for rec in self.records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        except OSError as exc:
            raise PersistenceError(f"cannot write manifest {self.path}: {exc}") from exc
        return self.path

    def verify(self) -> None:
        """Raise InputError unless every file exists and matches its hash."""
        for rec in self.records:
            p = self.root / rec["path"]
            if not p.exists():
                raise InputError(f"missing dataset file {p}")
            if file_sha256(p) != rec["sha256"]:
                raise InputError(f"hash mismatch for {p}")

    def load_images(self) -> torch.Tensor:
        if not self.records:
            raise InputError(f"manifest {self.path} is empty")
        return torch.stack([load_png(self.root / r["path"]) for r in self.records])

    @property
    def resolution(self) -> int:
        if not self.records:
            raise InputError(f"manifest {self.path} is empty")
        with Image.open(self.root / self.records[0]["path"]) as im:
            return im.size[0]

    def labels(self) -> list[str]:
        return [r["label"] for r in self.records]


def write_dataset(images: torch.Tensor, out_dir, label: str, seeds: Iterable[int] | None = None,
                  k: int | None = None, source_model_version: str | None = None,
                  extra: list[dict] | None = None) -> DatasetManifest:
    out_dir = Path(out_dir)
    seeds = list(seeds) if seeds is not None else list(range(len(images)))
    records = []
    for i, img in enumerate(images):
        rel = f"images/{i:06d}.png"
        save_png(img, out_dir / rel)
        rec = {"path": rel, "sha256": file_sha256(out_dir / rel), "label": label,
               "seed": int(seeds[i]), "k": k, "source_model_version": source_model_version}
        if extra is not None:
            rec.update(extra[i])
        records.append(rec)
    manifest = DatasetManifest(out_dir, records)
    manifest.write()
    return manifest


def write_corpus(out_dir, n: int, resolution: int = 32, seed: int = 0) -> DatasetManifest:
    images, attrs = render_faces(n, resolution, seed)
    extra = [{name: int(v[i]) for name, v in attrs.items()} for i in range(n)]
    return write_dataset(images, out_dir, "real", seeds=[seed] * n, extra=extra)


def check_disjoint(*manifests: DatasetManifest) -> None:
    """Raise InputError if any two manifests share an image (by content hash)."""
    seen: dict[str, Path] = {}
    for m in manifests:
        for h in m.hashes:
            if h in seen and seen[h] != m.root:
                raise InputError(f"image {h[:12]} appears in both {seen[h]} and {m.root}")
            seen[h] = m.root
