"""Reconstruction distance: multi-layer feature distance plus weighted L1.

    D(x, y) = sum_l ||f_l(x) - f_l(y)||_2^2 + lam * ||x - y||_1

``f_l`` are post-activation outputs of a small frozen convolutional
network trained once on the toy corpus's attribute labels. Both terms are
sums over entries by default; ``reduction="mean"`` divides each by its
element count instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state, save_state
from .corpus import ATTRIBUTE_CLASSES
from .errors import InputError
from .seeding import derive_seed, torch_generator

log = logging.getLogger(__name__)


class FeatureExtractor(nn.Module):
    """Frozen stack of convolutional blocks exposing each block's activation.

    ``blocks[i]`` maps the (pooled) output of block ``i - 1`` to tap ``i``.
    Between blocks the activation is average-pooled by ``pool`` (1 = none).
    """

    def __init__(self, blocks: nn.ModuleList, pool: int = 2, meta: dict | None = None):
        super().__init__()
        self.blocks = blocks
        self.pool = pool
        self.meta = meta or {}
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def n_taps(self) -> int:
        return len(self.blocks)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0 and self.pool > 1:
                x = F.avg_pool2d(x, self.pool)
            x = block(x)
            feats.append(x)
        return feats

    def save(self, path):
        return save_state(path, self.state_dict(), {"kind": "extractor", "pool": self.pool, **self.meta})

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        state, meta = load_state(path)
        if meta.get("kind") != "extractor":
            raise InputError(f"{path} is not a feature extractor checkpoint")
        ext = build_extractor(tuple(meta["channels"]))
        ext.load_state_dict(state)
        return ext.freeze()


def _conv_blocks(channels) -> nn.ModuleList:
    blocks, in_ch = [], 3
    for ch in channels:
        blocks.append(nn.Sequential(nn.Conv2d(in_ch, ch, 3, padding=1), nn.ReLU()))
        in_ch = ch
    return nn.ModuleList(blocks)


def build_extractor(channels=(16, 32, 64, 64), seed: int = 0) -> FeatureExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        blocks = _conv_blocks(channels)
    return FeatureExtractor(blocks, pool=2, meta={"channels": list(channels)})


def train_extractor(images: torch.Tensor, attributes: dict, channels=(16, 32, 64, 64), steps: int = 600,
                    batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> FeatureExtractor:
    """Train the conv stack as a multi-head attribute classifier, then freeze it.

    ``attributes`` maps attribute name to an integer label array, as returned
    by ``corpus.render_faces``.
    """
    ext = build_extractor(channels, seed=derive_seed(seed, "extractor-init"))
    for p in ext.parameters():
        p.requires_grad_(True)
    ext.train()
    names = sorted(attributes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "extractor-heads"))
        heads = nn.ModuleDict({k: nn.Linear(channels[-1], ATTRIBUTE_CLASSES.get(k, int(max(attributes[k])) + 1))
                               for k in names})
    labels = {k: torch.as_tensor(attributes[k], dtype=torch.long) for k in names}
    opt = torch.optim.Adam(list(ext.parameters()) + list(heads.parameters()), lr=lr)
    gen = torch_generator(derive_seed(seed, "extractor-batches"))
    n = images.shape[0]
    for step in range(steps):
        idx = torch.randint(n, (batch_size,), generator=gen)
        pooled = ext(images[idx])[-1].mean(dim=(2, 3))
        loss = sum(F.cross_entropy(heads[k](pooled), labels[k][idx]) for k in names)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 200 == 0:
            log.info("extractor step %d loss %.4f", step, loss.item())
    with torch.no_grad():
        pooled = ext(images[:512])[-1].mean(dim=(2, 3))
        ext.meta["train_accuracy"] = {
            k: (heads[k](pooled).argmax(1) == labels[k][:512]).double().mean().item() for k in names}
    return ext.freeze()


@dataclass
class DistanceConfig:
    """Which terms make up the reconstruction distance.

    ``lam`` weighs the pixel term. ``tap_layers=None`` means every extractor
    block. ``pixel`` picks ``"l1"`` or ``"l2"`` (squared error) for the pixel
    term; ``perceptual=False`` drops the feature term. ``normalize_layers``
    optionally divides individual tap terms by their element counts.
    """

    lam: float = 5.0
    tap_layers: tuple[int, ...] | None = None
    perceptual: bool = True
    pixel: str = "l1"
    reduction: str = "sum"
    normalize_layers: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.tap_layers is not None:
            self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if self.normalize_layers is not None:
            self.normalize_layers = tuple(bool(b) for b in self.normalize_layers)
        problems = self.problems()
        if problems:
            raise InputError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.lam >= 0:
            out.append("lam must be >= 0")
        if self.tap_layers is not None and len(self.tap_layers) == 0:
            out.append("tap_layers must be non-empty")
        if self.pixel not in ("l1", "l2"):
            out.append("pixel must be 'l1' or 'l2'")
        if self.reduction not in ("sum", "mean"):
            out.append("reduction must be 'sum' or 'mean'")
        if (self.normalize_layers is not None and self.tap_layers is not None
                and len(self.normalize_layers) != len(self.tap_layers)):
            out.append("normalize_layers needs one flag per tap layer")
        return out

    @classmethod
    def preset(cls, name: str) -> "DistanceConfig":
        """Named loss configurations: combined, l1, l2, perceptual."""
        presets = {
            "combined": dict(),
            "l1": dict(perceptual=False, lam=1.0, pixel="l1"),
            "l2": dict(perceptual=False, lam=1.0, pixel="l2"),
            "perceptual": dict(lam=0.0),
        }
        if name not in presets:
            raise InputError(f"unknown distance preset {name!r}")
        return cls(**presets[name])

    def to_dict(self) -> dict:
        return {"lam": self.lam, "tap_layers": list(self.tap_layers) if self.tap_layers else None,
                "perceptual": self.perceptual, "pixel": self.pixel, "reduction": self.reduction,
                "normalize_layers": list(self.normalize_layers) if self.normalize_layers else None}


def _check_pair(x, y):
    if x.shape != y.shape:
        raise InputError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim not in (3, 4):
        raise InputError("images must be (3, H, W) or (N, 3, H, W)")


def _batch(x):
    return x[None] if x.ndim == 3 else x


def _reduce(t: torch.Tensor, mean: bool) -> torch.Tensor:
    return t.mean() if mean else t.sum()


def perceptual_distance(x, y, extractor: FeatureExtractor, config: DistanceConfig | None = None) -> torch.Tensor:
    """Sum over tap layers of squared L2 distance between feature maps."""
    config = config or DistanceConfig()
    _check_pair(x, y)
    taps = config.tap_layers if config.tap_layers is not None else tuple(range(extractor.n_taps))
    if any(t < 0 or t >= extractor.n_taps for t in taps):
        raise InputError(f"tap layers {taps} out of range for {extractor.n_taps} blocks")
    fx = extractor(_batch(x))
    fy = extractor(_batch(y))
    total = x.new_zeros(())
    for j, t in enumerate(taps):
        norm = config.reduction == "mean" or bool(config.normalize_layers and config.normalize_layers[j])
        total = total + _reduce((fx[t] - fy[t]).pow(2), norm)
    return total


def pixel_distance(x, y, config: DistanceConfig | None = None) -> torch.Tensor:
    config = config or DistanceConfig()
    _check_pair(x, y)
    diff = x - y
    term = diff.abs() if config.pixel == "l1" else diff.pow(2)
    return _reduce(term, config.reduction == "mean")


def combined_distance(x, y, extractor: FeatureExtractor | None, config: DistanceConfig | None = None) -> torch.Tensor:
    """Feature distance plus ``lam`` times the pixel distance (differentiable in ``x``)."""
    config = config or DistanceConfig()
    _check_pair(x, y)
    total = x.new_zeros(())
    if config.perceptual:
        if extractor is None:
            raise InputError("perceptual term requested but no extractor given")
        total = total + perceptual_distance(x, y, extractor, config)
    if config.lam:
        total = total + config.lam * pixel_distance(x, y, config)
    return total


class Distance:
    """A (extractor, config) pair callable as ``dist(x, y)``."""

    def __init__(self, extractor: FeatureExtractor | None, config: DistanceConfig | None = None):
        self.extractor = extractor
        self.config = config or DistanceConfig()

    def __call__(self, x, y):
        return combined_distance(x, y, self.extractor, self.config)

    def to(self, dtype):
        if self.extractor is not None:
            self.extractor = self.extractor.to(dtype)
        return self
