"""One-shot adaptation: manifold projection, then manifold shifting.

Projection searches the per-layer style space for the style whose image is
nearest the target, with generator weights frozen. Shifting then freezes
that style (and the noise) and moves the synthesis weights so the
generated image matches the target, dragging the whole output distribution
along with it.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import InputError, OptimizationError, PersistenceError
from .generator import GeneratorModel, NoiseInput, StyleVector
from .imaging import tensor_sha256
from .perceptual import Distance
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class ProjectionConfig:
    max_iters: int = 1000
    lr: float = 0.01
    tol: float = 1e-5
    window: int = 50
    init: str = "zero"

    def problems(self) -> list[str]:
        out = []
        if self.max_iters < 1:
            out.append("projection.max_iters must be >= 1")
        if not self.lr > 0:
            out.append("projection.lr must be > 0")
        if not self.tol >= 0:
            out.append("projection.tol must be >= 0")
        if self.window < 1:
            out.append("projection.window must be >= 1")
        if self.init not in ("zero", "mean"):
            out.append("projection.init must be 'zero' or 'mean'")
        return out


@dataclass
class ShiftConfig:
    max_iters: int = 300
    lr: float = 0.001
    groups: tuple[str, ...] = ("synthesis",)
    tol: float = 0.0
    window: int = 50

    def __post_init__(self):
        self.groups = tuple(self.groups)

    def problems(self) -> list[str]:
        out = []
        if self.max_iters < 1:
            out.append("shift.max_iters must be >= 1")
        if not self.lr > 0:
            out.append("shift.lr must be > 0")
        if not self.groups:
            out.append("shift.groups must select at least one parameter group")
        if not self.tol >= 0:
            out.append("shift.tol must be >= 0")
        return out


def _validate(cfg):
    problems = cfg.problems()
    if problems:
        raise InputError("; ".join(problems))


def _check_target(model: GeneratorModel, target: torch.Tensor):
    if tuple(target.shape) != (3, model.R, model.R):
        raise InputError(f"target must be (3, {model.R}, {model.R}), got {tuple(target.shape)}")
    if not torch.isfinite(target).all() or target.min() < -1 or target.max() > 1:
        raise InputError("target values must be finite and within [-1, 1]")


@contextmanager
def frozen(module: torch.nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _stalled(trace: list[float], window: int, tol: float) -> bool:
    if trace[-1] == 0.0:
        return True
    if tol <= 0 or len(trace) <= window:
        return False
    ref = trace[-1 - window]
    return (ref - trace[-1]) / max(abs(ref), 1e-30) < tol


def _initial_style(model: GeneratorModel, init: str) -> torch.Tensor:
    if init == "zero":
        return torch.zeros(model.L, model.D, dtype=model.dtype)
    with torch.no_grad():
        z = torch.randn(1000, model.D, generator=torch.Generator().manual_seed(0)).to(model.dtype)
        return model.mapping(z).mean(0).expand(model.L, -1).clone()


def project(model: GeneratorModel, target: torch.Tensor, dist: Distance, config: ProjectionConfig | None = None,
            seed: int = 0) -> tuple[StyleVector, NoiseInput, list[float]]:
    """Find the style vector whose synthesis is nearest ``target``.

    Noise maps are drawn once from ``seed`` and held fixed. Returns the
    best style seen, the noise, and the per-iteration loss trace.
    """
    config = config or ProjectionConfig()
    _validate(config)
    _check_target(model, target)
    noise = model.make_noise(seed)
    target = target.to(model.dtype)
    s = _initial_style(model, config.init).requires_grad_(True)
    opt = torch.optim.Adam([s], lr=config.lr)
    trace: list[float] = []
    best, best_loss = s.detach().clone(), math.inf

    with frozen(model):
        for it in range(config.max_iters):
            loss = dist(model.synthesize(s, noise), target)
            value = loss.item()
            if not math.isfinite(value):
                raise OptimizationError("non-finite projection loss", it)
            trace.append(value)
            if value < best_loss:
                best_loss, best = value, s.detach().clone()
            if _stalled(trace, config.window, config.tol):
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    log.debug("projection: %d iters, loss %.5g -> %.5g", len(trace), trace[0], best_loss)
    return StyleVector(best), noise, trace


def select_parameters(model: GeneratorModel, groups) -> dict[str, torch.nn.Parameter]:
    """Parameters whose qualified name starts with any of ``groups``."""
    params = dict(model.named_parameters())
    selected = {}
    for g in groups:
        hits = {n: p for n, p in params.items() if n == g or n.startswith(g + ".")}
        if not hits:
            raise InputError(f"parameter group {g!r} matches no generator parameters")
        selected.update(hits)
    return selected


def shift(model: GeneratorModel, s_I: StyleVector, noise: NoiseInput, target: torch.Tensor, dist: Distance,
          config: ShiftConfig | None = None) -> GeneratorModel:
    """Return a copy of ``model`` whose selected weights minimize D(g(s_I), target).

    The input model is not modified. The returned model keeps the best
    weights seen (so its loss never exceeds the starting loss) and carries
    the per-iteration trace as ``loss_trace``.
    """
    config = config or ShiftConfig()
    _validate(config)
    _check_target(model, target)
    if (s_I.L, s_I.D) != (model.L, model.D):
        raise InputError(f"style vector is ({s_I.L}, {s_I.D}); model expects ({model.L}, {model.D})")
    shifted = copy.deepcopy(model)
    for p in shifted.parameters():
        p.requires_grad_(False)
    selected = select_parameters(shifted, config.groups)
    for p in selected.values():
        p.requires_grad_(True)
    style = s_I.layers.detach().to(model.dtype)
    target = target.to(model.dtype)
    opt = torch.optim.Adam(selected.values(), lr=config.lr)
    trace: list[float] = []
    best_loss = math.inf
    best_state = None

    for it in range(config.max_iters):
        loss = dist(shifted.synthesize(style, noise), target)
        value = loss.item()
        if not math.isfinite(value):
            raise OptimizationError("non-finite shift loss", it)
        trace.append(value)
        if value < best_loss:
            best_loss = value
            best_state = {n: p.detach().clone() for n, p in selected.items()}
        if _stalled(trace, config.window, config.tol):
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    with torch.no_grad():
        for n, p in selected.items():
            p.copy_(best_state[n])
    for p in shifted.parameters():
        p.requires_grad_(True)
    shifted.eval()
    shifted.version = f"{model.version}+shift-{tensor_sha256(target)[:8]}"
    shifted.loss_trace = trace
    log.debug("shift: %d iters, loss %.5g -> %.5g", len(trace), trace[0], best_loss)
    return shifted


@dataclass
class AdaptationResult:
    s_I: StyleVector
    shifted_model: GeneratorModel
    noise: NoiseInput
    projection_loss_trace: list[float]
    shift_loss_trace: list[float]
    target_hash: str
    seeds: dict
    config: dict = field(default_factory=dict)
    base_model_version: str = ""

    def summary(self) -> dict:
        return {
            "s_I": self.s_I.layers.detach().double().tolist(),
            "seeds": self.seeds,
            "noise_seed": self.noise.seed,
            "projection_loss_trace": self.projection_loss_trace,
            "shift_loss_trace": self.shift_loss_trace,
            "target_hash": self.target_hash,
            "config": self.config,
            "base_model_version": self.base_model_version,
            "shifted_model_version": self.shifted_model.version,
            "shifted_model_hash": self.shifted_model.weights_hash(),
        }

    def save(self, out_dir) -> Path:
        """Write ``model/`` (checkpoint) and ``adaptation.json`` under ``out_dir``."""
        out_dir = Path(out_dir)
        self.shifted_model.save(out_dir / "model")
        try:
            (out_dir / "adaptation.json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        except OSError as exc:
            raise PersistenceError(f"cannot write adaptation.json: {exc}") from exc
        return out_dir / "adaptation.json"

    @classmethod
    def load(cls, out_dir) -> "AdaptationResult":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "adaptation.json").read_text())
        model = GeneratorModel.load(out_dir / "model")
        s_I = StyleVector(torch.tensor(meta["s_I"], dtype=torch.float64).to(model.dtype))
        return cls(s_I, model, model.make_noise(meta["noise_seed"]), meta["projection_loss_trace"],
                   meta["shift_loss_trace"], meta["target_hash"], meta["seeds"], meta["config"],
                   meta["base_model_version"])


def adapt_one_shot(model: GeneratorModel, target: torch.Tensor, dist: Distance,
                   proj_config: ProjectionConfig | None = None, shift_config: ShiftConfig | None = None,
                   seed: int = 0) -> AdaptationResult:
    """Project ``target`` onto the model's manifold, then shift the model toward it."""
    proj_config = proj_config or ProjectionConfig()
    shift_config = shift_config or ShiftConfig()
    noise_seed = derive_seed(seed, "projection-noise")
    s_I, noise, ptrace = project(model, target, dist, proj_config, noise_seed)
    shifted = shift(model, s_I, noise, target, dist, shift_config)
    return AdaptationResult(
        s_I=s_I, shifted_model=shifted, noise=noise, projection_loss_trace=ptrace,
        shift_loss_trace=shifted.loss_trace, target_hash=tensor_sha256(target),
        seeds={"master": int(seed), "noise": noise_seed},
        config={"projection": asdict(proj_config), "shift": {**asdict(shift_config), "groups": list(shift_config.groups)},
                "distance": dist.config.to_dict()},
        base_model_version=model.version,
    )
