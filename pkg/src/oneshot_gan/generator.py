"""Toy style-based generator.

A mapping network turns a latent code ``z`` into a style vector, which is
broadcast to ``L`` per-layer copies. The synthesis network starts from a
learned 4x4 constant and runs one block per resolution up to ``R``; each
block holds two convolutions, each followed by additive noise and an
adaptive instance normalization whose scale/bias come from one style layer.
Hence ``L = 2 * log2(R / 4) + 2``.

Images are (3, R, R) tensors with values in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state, save_state, state_hash
from .errors import InputError
from .seeding import derive_seed, torch_generator

NORM_EPS = 1e-8


@dataclass
class StyleVector:
    """``L`` style layers of dimension ``D``, stored as an (L, D) tensor."""

    layers: torch.Tensor

    def __post_init__(self):
        if self.layers.ndim != 2:
            raise InputError(f"style vector must be (L, D), got {tuple(self.layers.shape)}")
        L = self.layers.shape[0]
        if L < 4 or L % 2:
            raise InputError(f"style layer count must be even and >= 4, got {L}")
        if not torch.isfinite(self.layers).all():
            raise InputError("style vector has non-finite entries")

    @property
    def L(self) -> int:
        return self.layers.shape[0]

    @property
    def D(self) -> int:
        return self.layers.shape[1]

    @classmethod
    def zeros(cls, L: int, D: int, dtype=torch.float32) -> "StyleVector":
        return cls(torch.zeros(L, D, dtype=dtype))

    def clone(self) -> "StyleVector":
        return StyleVector(self.layers.detach().clone())


@dataclass
class NoiseInput:
    """One fixed noise map per synthesis layer, reproducible from ``seed``."""

    maps: list[torch.Tensor]
    seed: int

    def batched(self) -> list[torch.Tensor]:
        return [m.view(1, 1, *m.shape) for m in self.maps]


@dataclass
class LatentCode:
    z: torch.Tensor
    seed: int | None = None

    def __post_init__(self):
        if self.z.ndim != 1:
            raise InputError("latent code must be a vector")
        if not torch.isfinite(self.z).all():
            raise InputError("latent code has non-finite entries")


@dataclass
class GeneratorConfig:
    resolution: int = 32
    style_dim: int = 64
    channels: tuple[int, ...] = (64, 64, 32, 16)
    mapping_layers: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise InputError(f"resolution must be a power of two >= 8, got {r}")
        if len(self.channels) != self.n_blocks:
            raise InputError(f"need {self.n_blocks} channel widths for resolution {r}, got {len(self.channels)}")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.resolution // 4)) + 1

    @property
    def n_layers(self) -> int:
        return 2 * self.n_blocks

    def to_dict(self) -> dict:
        return {"resolution": self.resolution, "style_dim": self.style_dim,
                "channels": list(self.channels), "mapping_layers": self.mapping_layers}


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, n_layers: int = 3):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_layers))

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


def instance_norm(x: torch.Tensor) -> torch.Tensor:
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = (x - mean).pow(2).mean(dim=(2, 3), keepdim=True)
    return (x - mean) * torch.rsqrt(var + NORM_EPS)


class StyledConv(nn.Module):
    """conv -> noise -> leaky ReLU -> instance norm -> style scale/bias."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.noise_strength = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(style_dim, 2 * out_ch)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(style_dim))
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, style, noise, record=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x)
        x = x + self.noise_strength.view(1, -1, 1, 1) * noise
        x = F.leaky_relu(x, 0.2)
        x = instance_norm(x)
        if record is not None:
            record.append(x)
        gamma, beta = self.affine(style).chunk(2, dim=1)
        return x * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.channels
        self.const = nn.Parameter(torch.randn(1, ch[0], 4, 4))
        convs = []
        for b in range(cfg.n_blocks):
            in_ch = ch[0] if b == 0 else ch[b - 1]
            convs.append(StyledConv(in_ch, ch[b], cfg.style_dim, upsample=b > 0))
            convs.append(StyledConv(ch[b], ch[b], cfg.style_dim, upsample=False))
        self.convs = nn.ModuleList(convs)
        self.to_rgb = nn.Conv2d(ch[-1], 3, 1)
        self.shapes = [(4 * 2 ** (i // 2),) * 2 for i in range(cfg.n_layers)]

    def forward(self, styles, noises, record=None):
        """styles: (N, L, D); noises: list of L tensors (N or 1, 1, H, W)."""
        x = self.const.expand(styles.shape[0], -1, -1, -1)
        for i, conv in enumerate(self.convs):
            x = conv(x, styles[:, i], noises[i], record)
        return torch.tanh(self.to_rgb(x))


class GeneratorModel(nn.Module):
    """Mapping network ``f`` plus synthesis network ``g`` with versioned weights."""

    def __init__(self, cfg: GeneratorConfig | None = None, seed: int = 0, version: str = "base-0"):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.seed = int(seed)
        self.version = version
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.mapping = MappingNetwork(self.cfg.style_dim, self.cfg.mapping_layers)
            self.synthesis = SynthesisNetwork(self.cfg)

    @property
    def R(self) -> int:
        return self.cfg.resolution

    @property
    def L(self) -> int:
        return self.cfg.n_layers

    @property
    def D(self) -> int:
        return self.cfg.style_dim

    @property
    def noise_shapes(self) -> list[tuple[int, int]]:
        return list(self.synthesis.shapes)

    @property
    def dtype(self):
        return self.synthesis.const.dtype

    def map(self, z: LatentCode | torch.Tensor) -> StyleVector:
        """f(z) broadcast to all ``L`` layers."""
        zt = z.z if isinstance(z, LatentCode) else z
        if zt.ndim != 1 or zt.shape[0] != self.D:
            raise InputError(f"latent code must have dimension {self.D}, got {tuple(zt.shape)}")
        w = self.mapping(zt.to(self.dtype)[None])[0]
        return StyleVector(w.expand(self.L, -1).clone())

    def map_batch(self, z: torch.Tensor) -> torch.Tensor:
        """(N, D) latents -> (N, L, D) style tensors."""
        return self.mapping(z.to(self.dtype))[:, None, :].expand(-1, self.L, -1)

    def make_noise(self, seed: int) -> NoiseInput:
        gen = torch_generator(seed)
        maps = [torch.randn(h, w, generator=gen).to(self.dtype) for h, w in self.noise_shapes]
        return NoiseInput(maps, int(seed))

    def _check(self, s: torch.Tensor, noise: NoiseInput):
        if tuple(s.shape) != (self.L, self.D):
            raise InputError(f"style vector must be ({self.L}, {self.D}), got {tuple(s.shape)}")
        if len(noise.maps) != self.L or any(tuple(m.shape) != shp for m, shp in zip(noise.maps, self.noise_shapes)):
            raise InputError("noise maps do not match the synthesis layer shapes")

    def synthesize(self, s: StyleVector | torch.Tensor, noise: NoiseInput, record=None) -> torch.Tensor:
        """Render one (3, R, R) image; ``s`` may be a raw (L, D) tensor to keep gradients.

        If ``record`` is a list, the instance-normalized activations (before
        the style scale/bias) are appended to it, one per layer.
        """
        st = s.layers if isinstance(s, StyleVector) else s
        self._check(st, noise)
        return self.synthesis(st[None].to(self.dtype), noise.batched(), record)[0]

    def synthesize_batch(self, styles: torch.Tensor, noises: list[torch.Tensor]) -> torch.Tensor:
        return self.synthesis(styles.to(self.dtype), noises)

    # -- persistence --------------------------------------------------------

    def metadata(self) -> dict:
        return {"kind": "generator", "version": self.version, "R": self.R, "L": self.L, "D": self.D,
                "creation_seed": self.seed, "config": self.cfg.to_dict()}

    def save(self, path):
        return save_state(path, self.state_dict(), self.metadata())

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        state, meta = load_state(path)
        if meta.get("kind") != "generator":
            raise InputError(f"{path} is not a generator checkpoint")
        cfg = GeneratorConfig(**meta["config"])
        model = cls(cfg, seed=meta["creation_seed"], version=meta["version"])
        model.load_state_dict(state)
        return model.eval()

    def weights_hash(self) -> str:
        return state_hash(self)


def synthesize(model: GeneratorModel, s: StyleVector, noise: NoiseInput) -> torch.Tensor:
    with torch.no_grad():
        return model.synthesize(s, noise)


def sample_latents(model: GeneratorModel, seeds) -> torch.Tensor:
    return torch.stack([torch.randn(model.D, generator=torch_generator(s)) for s in seeds]).to(model.dtype)


def batch_noise(model: GeneratorModel, seeds) -> list[torch.Tensor]:
    per_image = [model.make_noise(s).maps for s in seeds]
    return [torch.stack([maps[i] for maps in per_image])[:, None] for i in range(model.L)]


@dataclass
class Sample:
    latent: LatentCode
    style: StyleVector
    noise: NoiseInput
    image: torch.Tensor


def sample_seeds(seed: int, n: int) -> list[int]:
    return [derive_seed(seed, "sample", i) for i in range(n)]


def sample_random(model: GeneratorModel, n: int, seed: int) -> list[Sample]:
    """Draw ``n`` (latent, style, noise, image) tuples, reproducible from ``seed``."""
    if n < 1:
        raise InputError("n must be >= 1")
    out = []
    with torch.no_grad():
        for s in sample_seeds(seed, n):
            z = LatentCode(torch.randn(model.D, generator=torch_generator(s)).to(model.dtype), s)
            style = model.map(z)
            noise = model.make_noise(derive_seed(s, "noise"))
            out.append(Sample(z, style, noise, model.synthesize(style, noise)))
    return out


def generate_images(model: GeneratorModel, n: int, seed: int, batch_size: int = 100,
                    style_fn=None) -> tuple[torch.Tensor, torch.Tensor, list[int]]:
    """Batched sampling. ``style_fn`` may edit the (N, L, D) styles before synthesis.

    Returns images, the styles actually used, and per-image seeds.
    """
    seeds = sample_seeds(seed, n)
    images, styles = [], []
    with torch.no_grad():
        for i in range(0, n, batch_size):
            chunk = seeds[i:i + batch_size]
            st = model.map_batch(sample_latents(model, chunk)).clone()
            if style_fn is not None:
                st = style_fn(st)
            noises = batch_noise(model, [derive_seed(s, "noise") for s in chunk])
            images.append(model.synthesize_batch(st, noises))
            styles.append(st)
    return torch.cat(images), torch.cat(styles), seeds
