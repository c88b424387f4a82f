"""Adversarial training of the base generator (and generator fine-tuning).

Non-saturating GAN loss with a lazily applied R1 gradient penalty on real
images, as in the reference style-based generator.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import DatasetManifest
from .errors import InputError, TrainingError
from .generator import GeneratorConfig, GeneratorModel, batch_noise
from .seeding import derive_seed, torch_generator

log = logging.getLogger(__name__)


class Discriminator(nn.Module):
    def __init__(self, resolution: int = 32, channels=(16, 32, 64, 64), seed: int = 0):
        super().__init__()
        n_down = int(math.log2(resolution // 4))
        channels = list(channels)[: n_down + 1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = nn.Conv2d(3, channels[0], 3, padding=1)
            self.blocks = nn.ModuleList(
                nn.Conv2d(channels[i], channels[i + 1 if i + 1 < len(channels) else i], 3, padding=1)
                for i in range(n_down)
            )
            last = channels[-1]
            self.final = nn.Conv2d(last + 1, last, 3, padding=1)
            self.out = nn.Linear(last * 16, 1)

    def forward(self, x):
        x = F.leaky_relu(self.stem(x), 0.2)
        for conv in self.blocks:
            x = F.avg_pool2d(F.leaky_relu(conv(x), 0.2), 2)
        # minibatch standard deviation feature
        std = (x.var(dim=0, unbiased=False) + 1e-8).sqrt().mean().expand(x.shape[0], 1, *x.shape[2:])
        x = F.leaky_relu(self.final(torch.cat([x, std], dim=1)), 0.2)
        return self.out(x.flatten(1)).squeeze(1)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 0.002
    mapping_lr_mult: float = 0.1
    r1_gamma: float = 0.5
    r1_every: int = 4
    seed: int = 0
    keep_checkpoints: int = 2
    log_every: int = 250

    def validate(self):
        problems = []
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.r1_every < 1:
            problems.append("r1_every must be >= 1")
        if problems:
            raise InputError("; ".join(problems))


def _as_images(data) -> torch.Tensor:
    if isinstance(data, DatasetManifest):
        return data.load_images()
    return torch.as_tensor(data, dtype=torch.float32)


def _noise(G: GeneratorModel, b: int, gen) -> list[torch.Tensor]:
    return [torch.randn(b, 1, h, w, generator=gen) for h, w in G.noise_shapes]


def _adversarial_loop(G: GeneratorModel, D: Discriminator, reals: torch.Tensor, cfg: TrainConfig,
                      out_dir: Path | None, tag: str) -> list[dict]:
    g_params = [
        {"params": G.synthesis.parameters(), "lr": cfg.lr},
        {"params": G.mapping.parameters(), "lr": cfg.lr * cfg.mapping_lr_mult},
    ]
    opt_g = torch.optim.Adam(g_params, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=(0.0, 0.99))
    gen = torch_generator(derive_seed(cfg.seed, tag, "batches"))
    n = reals.shape[0]
    steps_per_epoch = max(1, n // cfg.batch_size)
    perm = torch.randperm(n, generator=gen)
    cursor = 0
    trace = []
    last_good = None
    saved: list[Path] = []

    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            perm = torch.randperm(n, generator=gen)
            cursor = 0
        idx = perm[cursor:cursor + cfg.batch_size] if n >= cfg.batch_size else torch.randint(n, (cfg.batch_size,), generator=gen)
        cursor += cfg.batch_size
        real = reals[idx]
        b = real.shape[0]

        # discriminator
        with torch.no_grad():
            fake = G.synthesize_batch(G.map_batch(torch.randn(b, G.D, generator=gen)), _noise(G, b, gen))
        d_loss = F.softplus(D(fake)).mean() + F.softplus(-D(real)).mean()
        r1 = torch.zeros(())
        if cfg.r1_gamma > 0 and step % cfg.r1_every == 0:
            real_req = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(D(real_req).sum(), real_req, create_graph=True)
            r1 = grad.pow(2).flatten(1).sum(1).mean()
            d_total = d_loss + 0.5 * cfg.r1_gamma * cfg.r1_every * r1
        else:
            d_total = d_loss
        opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        opt_d.step()

        # generator
        fake = G.synthesize_batch(G.map_batch(torch.randn(b, G.D, generator=gen)), _noise(G, b, gen))
        g_loss = F.softplus(-D(fake)).mean()
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        rec = {"step": step, "d_loss": d_loss.item(), "g_loss": g_loss.item(), "r1": r1.item()}
        trace.append(rec)
        if not all(math.isfinite(v) for v in rec.values()):
            raise TrainingError(f"non-finite loss at step {step}", last_good)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d d=%.4f g=%.4f r1=%.4f", tag, step, rec["d_loss"], rec["g_loss"], rec["r1"])

        end_of_epoch = (step + 1) % steps_per_epoch == 0 or step + 1 == cfg.steps
        if out_dir is not None and end_of_epoch:
            epoch = (step + 1 + steps_per_epoch - 1) // steps_per_epoch
            ckpt = G.save(out_dir / f"epoch_{epoch:04d}")
            last_good = ckpt
            if ckpt not in saved:
                saved.append(ckpt)
            while len(saved) > cfg.keep_checkpoints:
                shutil.rmtree(saved.pop(0), ignore_errors=True)
    if out_dir is not None:
        (out_dir / "loss_trace.json").write_text(json.dumps(trace))
    return trace


def train_base(real_images, config: TrainConfig | None = None, gen_config: GeneratorConfig | None = None,
               out_dir=None) -> GeneratorModel:
    """Train a base generator on ``real_images`` (a manifest or an image tensor).

    Writes a checkpoint per epoch and ``loss_trace.json`` under ``out_dir``
    when given. The returned model carries the trace as ``model.loss_trace``.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    gen_config = gen_config or GeneratorConfig()
    reals = _as_images(real_images)
    if reals.shape[0] == 0:
        raise InputError("training corpus is empty")
    if tuple(reals.shape[1:]) != (3, gen_config.resolution, gen_config.resolution):
        raise InputError(f"corpus images are {tuple(reals.shape[1:])}, generator resolution is {gen_config.resolution}")
    out_dir = Path(out_dir) if out_dir is not None else None

    G = GeneratorModel(gen_config, seed=derive_seed(cfg.seed, "G-init"), version=f"base-s{cfg.seed}")
    D = Discriminator(gen_config.resolution, seed=derive_seed(cfg.seed, "D-init"))
    trace = _adversarial_loop(G, D, reals, cfg, out_dir, "base")
    G.eval()
    G.loss_trace = trace
    return G


def finetune(model: GeneratorModel, images, config: TrainConfig, out_dir=None) -> GeneratorModel:
    """Adversarially fine-tune a copy of ``model`` on a (possibly tiny) image set.

    The discriminator starts from scratch; with one or a handful of images
    this is the mode-collapse-prone baseline the one-shot pipeline avoids.
    """
    config.validate()
    reals = _as_images(images)
    if reals.shape[0] == 0:
        raise InputError("fine-tuning set is empty")
    if tuple(reals.shape[1:]) != (3, model.R, model.R):
        raise InputError("fine-tuning images do not match the generator resolution")
    G = copy.deepcopy(model).train()
    G.version = f"{model.version}+ft{reals.shape[0]}"
    D = Discriminator(model.R, seed=derive_seed(config.seed, "D-ft"))
    trace = _adversarial_loop(G, D, reals, config, Path(out_dir) if out_dir else None, "finetune")
    G.eval()
    G.loss_trace = trace
    return G
