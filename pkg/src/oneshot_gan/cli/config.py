"""Pipeline configuration: a versioned TOML file validated against a schema.

Every section maps onto one of the library's config dataclasses. Missing
keys take the versioned defaults below; unknown keys, wrong types and
violated invariants are all collected and reported together.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from ..adapt import ProjectionConfig, ShiftConfig
from ..detector import DetectorConfig
from ..errors import ConfigError
from ..experiments.bench import BenchConfig
from ..generator import GeneratorConfig
from ..perceptual import DistanceConfig
from ..training import TrainConfig

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "ONESHOT_OUTPUT_ROOT"


@dataclass
class PathsConfig:
    output_root: str = "runs/default"
    base_checkpoint: str = ""
    corpus: str = ""


@dataclass
class CorpusConfig:
    size: int = 4000
    white_balance: float = 0.1
    n_real_train: int = 1000
    n_real_test: int = 300
    n_target_test: int = 300
    n_target_pool: int = 1000


@dataclass
class MixSection:
    k: int = 3
    n: int = 2000


@dataclass
class ExtractorSection:
    steps: int = 600


SECTIONS = {
    "paths": PathsConfig,
    "corpus": CorpusConfig,
    "generator": GeneratorConfig,
    "training": TrainConfig,
    "extractor": ExtractorSection,
    "projection": ProjectionConfig,
    "shift": ShiftConfig,
    "mix": MixSection,
    "distance": DistanceConfig,
    "detector": DetectorConfig,
}
TOP_LEVEL = {"version": int, "seed": int, "resolution": int, "fixture": str}


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    resolution: int = 32
    fixture: str = "colorcast"
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    mix: MixSection = field(default_factory=MixSection)
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    # -- conversion -------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in TOP_LEVEL}
        for name in SECTIONS:
            section = getattr(self, name)
            d = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
            if name == "shift":
                d["groups"] = list(section.groups)
            out[name] = {k: v for k, v in d.items() if v is not None}
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.paths.output_root)

    def bench_config(self) -> BenchConfig:
        return BenchConfig(
            seed=self.seed, resolution=self.resolution, fixture=self.fixture,
            white_balance=self.corpus.white_balance, corpus_size=self.corpus.size,
            n_real_train=self.corpus.n_real_train, n_real_test=self.corpus.n_real_test,
            n_target_test=self.corpus.n_target_test, n_target_pool=self.corpus.n_target_pool,
            dataset_size=self.mix.n, extractor_steps=self.extractor.steps, generator=self.generator,
            base_training=self.training, projection=self.projection, shift=self.shift, mix_k=self.mix.k,
            detector=self.detector, distance=self.distance)


def _typecheck(value, default, where: str, problems: list[str]):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and not isinstance(default, bool):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        problems.append(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")
    return ok


def _build_section(name: str, cls, raw: dict, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected a table")
        return cls()
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
            continue
        default = getattr(defaults, key)
        if default is None or _typecheck(value, default, f"{name}.{key}", problems):
            kwargs[key] = float(value) if isinstance(default, float) and not isinstance(value, bool) else value
    try:
        obj = cls(**kwargs)
    except (ValueError, TypeError) as exc:
        problems.append(f"{name}: {exc}")
        return cls()
    # sub-config invariants
    for check in ("problems",):
        if hasattr(obj, check):
            problems += [p if p.startswith(name) else f"{name}: {p}" for p in getattr(obj, check)()]
    if hasattr(obj, "validate") and name == "training":
        try:
            obj.validate()
        except ValueError as exc:
            problems.append(f"training: {exc}")
    return obj


def config_from_dict(raw: dict) -> PipelineConfig:
    problems: list[str] = []
    kwargs = {}
    for key, value in raw.items():
        if key in TOP_LEVEL:
            if _typecheck(value, TOP_LEVEL[key](), key, problems):
                kwargs[key] = value
        elif key in SECTIONS:
            kwargs[key] = _build_section(key, SECTIONS[key], value, problems)
        else:
            problems.append(f"{key}: unknown key")
    cfg = PipelineConfig(**kwargs)
    if cfg.version != CONFIG_VERSION:
        problems.append(f"version: unsupported config version {cfg.version} (expected {CONFIG_VERSION})")
    if cfg.generator.resolution != cfg.resolution:
        problems.append(f"generator.resolution ({cfg.generator.resolution}) must equal resolution ({cfg.resolution})")
    from ..corpus import FIXTURES

    if cfg.fixture not in FIXTURES:
        problems.append(f"fixture: unknown fixture {cfg.fixture!r}")
    if not 0 <= cfg.mix.k <= cfg.generator.n_layers:
        problems.append(f"mix.k must lie in [0, {cfg.generator.n_layers}]")
    if cfg.mix.n < 1:
        problems.append("mix.n must be >= 1")
    for name, value in asdict(cfg.corpus).items():
        if name != "white_balance" and value < 1:
            problems.append(f"corpus.{name} must be >= 1")
    if cfg.corpus.white_balance < 0:
        problems.append("corpus.white_balance must be >= 0")
    if problems:
        raise ConfigError(problems)
    return cfg


def loads(text: str) -> PipelineConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    return config_from_dict(raw)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return loads(text)
