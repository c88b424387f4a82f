"""Shared desk-scale assets for the experiment protocols.

A workbench lives in a run directory and holds the procedural corpus splits,
the trained base generator and the frozen feature extractor. Everything is
derived from one master seed; expensive pieces are cached on disk and reused
when the stored config snapshot matches.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ..adapt import AdaptationResult, ProjectionConfig, ShiftConfig, adapt_one_shot
from ..corpus import DatasetManifest, apply_fixture, check_disjoint, render_faces, write_dataset
from ..detector import DetectorConfig
from ..generator import GeneratorConfig, GeneratorModel
from ..mixing import MixConfig
from ..perceptual import Distance, DistanceConfig, FeatureExtractor, train_extractor
from ..seeding import derive_seed
from ..training import TrainConfig, train_base

log = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    seed: int = 0
    resolution: int = 32
    fixture: str = "colorcast"
    white_balance: float = 0.1
    corpus_size: int = 4000
    n_real_train: int = 1000
    n_real_test: int = 300
    n_target_test: int = 300
    n_target_pool: int = 1000
    dataset_size: int = 2000
    extractor_steps: int = 600
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    base_training: TrainConfig = field(default_factory=TrainConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    mix_k: int = 3
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    distance: DistanceConfig = field(default_factory=DistanceConfig)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        d["shift"]["groups"] = list(self.shift.groups)
        d["distance"] = self.distance.to_dict()
        return d

    def base_key(self) -> str:
        """Hash of everything the cached base model and extractor depend on."""
        keyed = {k: v for k, v in self.snapshot().items()
                 if k in ("seed", "resolution", "white_balance", "corpus_size", "extractor_steps",
                          "generator", "base_training")}
        keyed["base_training"].pop("log_every", None)
        keyed["base_training"].pop("keep_checkpoints", None)
        return hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()[:16]

    def mix_config(self, tag: str = "fake") -> MixConfig:
        return MixConfig(k=self.mix_k, n=self.dataset_size, seed=derive_seed(self.seed, "dataset", tag))


class Workbench:
    """Lazily built, disk-cached experiment assets under ``root``."""

    def __init__(self, root, config: BenchConfig | None = None, base_checkpoint=None):
        self.root = Path(root)
        self.cfg = config or BenchConfig()
        self.base_checkpoint = Path(base_checkpoint) if base_checkpoint else None
        self._base: GeneratorModel | None = None
        self._extractor: FeatureExtractor | None = None
        self._splits: dict[str, DatasetManifest] = {}
        self._tensors: dict[str, torch.Tensor] = {}
        self._adaptations: dict[str, AdaptationResult] = {}
        self.memo: dict = {}

    # -- paths ----------------------------------------------------------------

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def datasets(self) -> Path:
        return self.root / "datasets"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def seed(self, *names) -> int:
        return derive_seed(self.cfg.seed, *names)

    # -- corpus splits ----------------------------------------------------------

    def _render(self, name: str, n: int) -> torch.Tensor:
        images, _ = render_faces(n, self.cfg.resolution, self.seed("render", name), self.cfg.white_balance)
        return images

    def split(self, name: str) -> DatasetManifest:
        """One of: corpus, real_train, real_test, target_test, target_pool, one_shot."""
        if name in self._splits:
            return self._splits[name]
        sizes = {"corpus": self.cfg.corpus_size, "real_train": self.cfg.n_real_train,
                 "real_test": self.cfg.n_real_test, "target_test": self.cfg.n_target_test,
                 "target_pool": self.cfg.n_target_pool, "one_shot": 1}
        if name not in sizes:
            raise KeyError(name)
        tag = f"{name}-{self.cfg.fixture}" if name.startswith("target") or name == "one_shot" else name
        out = self.datasets / tag
        stamp = {"seed": self.cfg.seed, "n": sizes[name], "R": self.cfg.resolution,
                 "white_balance": self.cfg.white_balance, "fixture": self.cfg.fixture}
        stamp_path = out / "split.json"
        if stamp_path.exists() and json.loads(stamp_path.read_text()) == stamp:
            manifest = DatasetManifest.load(out)
        else:
            images = self._render(name, sizes[name])
            label = "real"
            if name.startswith("target") or name == "one_shot":
                images = apply_fixture(self.cfg.fixture, images)
                label = self.cfg.fixture
            manifest = write_dataset(images, out, label, seeds=[self.seed("render", name)] * len(images))
            stamp_path.write_text(json.dumps(stamp))
        self._splits[name] = manifest
        return manifest

    def images(self, name: str) -> torch.Tensor:
        if name not in self._tensors:
            self._tensors[name] = self.split(name).load_images()
        return self._tensors[name]

    def one_shot(self) -> torch.Tensor:
        return self.images("one_shot")[0]

    def check_splits_disjoint(self):
        check_disjoint(*(self.split(n) for n in
                         ("corpus", "real_train", "real_test", "target_test", "target_pool", "one_shot")))

    # -- models -------------------------------------------------------------------

    def base_model(self) -> GeneratorModel:
        if self._base is None and self.base_checkpoint is not None:
            self._base = GeneratorModel.load(self.base_checkpoint)
        if self._base is None:
            path = self.checkpoints / f"base-{self.cfg.base_key()}"
            final = path / "final"
            if (final / "metadata.json").exists():
                self._base = GeneratorModel.load(final)
            else:
                log.info("training base generator (%d steps)", self.cfg.base_training.steps)
                train_cfg = TrainConfig(**{**asdict(self.cfg.base_training), "seed": self.seed("base")})
                model = train_base(self.split("corpus"), train_cfg, self.cfg.generator, out_dir=path)
                model.save(final)
                self._base = GeneratorModel.load(final)
        return self._base

    def untrained_model(self) -> GeneratorModel:
        """The base generator at initialization (same init seed as training)."""
        return GeneratorModel(self.cfg.generator, seed=derive_seed(self.seed("base"), "G-init"))

    def extractor(self) -> FeatureExtractor:
        if self._extractor is None:
            path = self.checkpoints / f"extractor-{self.cfg.base_key()}"
            if (path / "metadata.json").exists():
                self._extractor = FeatureExtractor.load(path)
            else:
                images, attrs = render_faces(3000, self.cfg.resolution, self.seed("render", "extractor"),
                                             self.cfg.white_balance)
                ext = train_extractor(images, attrs, steps=self.cfg.extractor_steps, seed=self.seed("extractor"))
                ext.save(path)
                self._extractor = FeatureExtractor.load(path)
        return self._extractor

    def distance(self, config: DistanceConfig | None = None) -> Distance:
        return Distance(self.extractor(), config or self.cfg.distance)

    def adaptation(self, distance: DistanceConfig | None = None, tag: str = "default") -> AdaptationResult:
        """One-shot adaptation of the base model to the fixture's one-shot image (cached)."""
        if tag not in self._adaptations:
            out = self.root / "adapt" / f"{self.cfg.fixture}-{tag}"
            result = adapt_one_shot(self.base_model(), self.one_shot(), self.distance(distance),
                                    self.cfg.projection, self.cfg.shift, seed=self.seed("adapt"))
            result.save(out)
            self._adaptations[tag] = result
        return self._adaptations[tag]

    def detector_config(self, **overrides) -> DetectorConfig:
        return DetectorConfig(**{**asdict(self.cfg.detector), "seed": self.seed("detector"), **overrides})
