"""Style mixing and adapted dataset synthesis.

Random style vectors keep their early (coarse) layers and take the final
``k`` layers from the target's projected style, so generated faces keep
their identity while inheriting the target's low-level statistics.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adapt import AdaptationResult
from .corpus import DatasetManifest, write_dataset
from .errors import InputError, PersistenceError
from .generator import GeneratorModel, StyleVector, generate_images


@dataclass
class MixConfig:
    k: int = 3
    n: int = 2000
    seed: int = 0
    batch_size: int = 100

    def problems(self, L: int | None = None) -> list[str]:
        out = []
        if self.k < 0:
            out.append("mix.k must be >= 0")
        if L is not None and self.k > L:
            out.append(f"mix.k must be <= L ({L})")
        if self.n < 1:
            out.append("mix.n must be >= 1")
        return out


def mix_styles(s: StyleVector, s_I: StyleVector, k: int) -> StyleVector:
    """Layers ``[0, L-k)`` from ``s``, layers ``[L-k, L)`` from ``s_I``."""
    if (s.L, s.D) != (s_I.L, s_I.D):
        raise InputError(f"style shapes differ: ({s.L}, {s.D}) vs ({s_I.L}, {s_I.D})")
    if not 0 <= k <= s.L:
        raise InputError(f"k must lie in [0, {s.L}], got {k}")
    out = s.layers.detach().clone()
    if k:
        out[s.L - k:] = s_I.layers[s.L - k:].detach().to(out.dtype)
    return StyleVector(out)


def mix_batch(styles: torch.Tensor, s_I: StyleVector, k: int) -> torch.Tensor:
    """Vectorized ``mix_styles`` over an (N, L, D) batch."""
    if not 0 <= k <= styles.shape[1]:
        raise InputError(f"k must lie in [0, {styles.shape[1]}], got {k}")
    out = styles.clone()
    if k:
        L = styles.shape[1]
        out[:, L - k:] = s_I.layers[L - k:].detach().to(out.dtype)
    return out


def generate_dataset(model: GeneratorModel, out_dir, config: MixConfig, s_I: StyleVector | None = None,
                     label: str = "fake") -> DatasetManifest:
    """Sample ``config.n`` images, grafting the last ``k`` layers of ``s_I`` when given.

    Each image has its own latent and noise seed. Writes PNGs, the JSON-lines
    manifest and ``styles.npy`` (the style vectors actually synthesized).
    """
    problems = config.problems(model.L)
    if problems:
        raise InputError("; ".join(problems))
    k = config.k if s_I is not None else 0
    style_fn = (lambda st: mix_batch(st, s_I, k)) if s_I is not None else None
    images, styles, seeds = generate_images(model, config.n, config.seed, config.batch_size, style_fn)
    out_dir = Path(out_dir)
    manifest = write_dataset(images, out_dir, label, seeds=seeds, k=k, source_model_version=model.version)
    try:
        np.save(out_dir / "styles.npy", styles.detach().float().numpy())
    except OSError as exc:
        raise PersistenceError(f"cannot write styles: {exc}") from exc
    return manifest


def generate_adapted_dataset(result: AdaptationResult, config: MixConfig, out_dir, label: str = "fake") -> DatasetManifest:
    return generate_dataset(result.shifted_model, out_dir, config, result.s_I, label)
