"""Real-vs-fake and multi-domain classifiers, and average precision.

Average precision uses step-wise interpolation over descending score
thresholds:

    AP = sum_k (R_k - R_{k-1}) * P_k

where k runs over the distinct score values, so tied scores enter as a
single threshold and their input order does not matter.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state, save_state
from .corpus import DatasetManifest
from .errors import InputError, TrainingError
from .seeding import derive_seed, torch_generator

log = logging.getLogger(__name__)

AP_CONVENTION = "step-interp-v1"


def average_precision(scores, labels) -> float:
    """AP of ``scores`` for the positive class (``labels == 1``)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be 1-D arrays of equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InputError("average precision needs at least one positive example")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    precision = tp[last_of_group] / (last_of_group + 1)
    recall = tp[last_of_group] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# -- model ----------------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class DetectorModel(nn.Module):
    """Small 4-block residual CNN with a softmax head over ``classes``."""

    def __init__(self, classes=("real", "fake"), resolution: int = 32, widths=(24, 32, 48, 64, 64), seed: int = 0):
        super().__init__()
        self.classes = list(classes)
        self.resolution = resolution
        self.widths = tuple(widths)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            w = widths
            self.stem = nn.Sequential(nn.Conv2d(3, w[0], 3, 1, 1, bias=False), nn.BatchNorm2d(w[0]), nn.ReLU())
            self.blocks = nn.Sequential(
                ResBlock(w[0], w[1], 2), ResBlock(w[1], w[2], 2), ResBlock(w[2], w[3], 2), ResBlock(w[3], w[4], 1))
            self.head = nn.Linear(w[4], len(self.classes))

    def features(self, x):
        return self.blocks(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict_proba(self, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
        self.eval()
        return torch.cat([F.softmax(self(images[i:i + batch_size]), dim=1)
                          for i in range(0, len(images), batch_size)])

    @torch.no_grad()
    def embed(self, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
        self.eval()
        return torch.cat([self.features(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])

    def save(self, path):
        return save_state(path, self.state_dict(), {
            "kind": "detector", "classes": self.classes, "resolution": self.resolution, "widths": list(self.widths)})

    @classmethod
    def load(cls, path) -> "DetectorModel":
        state, meta = load_state(path)
        if meta.get("kind") != "detector":
            raise InputError(f"{path} is not a detector checkpoint")
        model = cls(meta["classes"], meta["resolution"], meta["widths"])
        model.load_state_dict(state)
        return model.eval()


@dataclass
class DetectorConfig:
    epochs: int = 8
    max_steps: int | None = None
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    class_weighting: bool = False
    val_fraction: float = 0.1
    patience: int = 3
    flip: bool = True
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("detector.epochs must be >= 1")
        if self.batch_size < 1:
            out.append("detector.batch_size must be >= 1")
        if not self.lr > 0:
            out.append("detector.lr must be > 0")
        if not 0 <= self.val_fraction < 1:
            out.append("detector.val_fraction must lie in [0, 1)")
        return out


def as_images(data) -> torch.Tensor:
    if isinstance(data, DatasetManifest):
        return data.load_images()
    t = torch.as_tensor(data, dtype=torch.float32)
    if t.ndim != 4 or t.shape[0] == 0:
        raise InputError("expected a non-empty (N, 3, R, R) image batch")
    return t


def _split(n: int, frac: float, seed: int):
    perm = torch.randperm(n, generator=torch_generator(seed))
    n_val = int(round(n * frac))
    return perm[n_val:], perm[:n_val]


def _fit(images: torch.Tensor, labels: torch.Tensor, classes, config: DetectorConfig) -> DetectorModel:
    problems = config.problems()
    if problems:
        raise InputError("; ".join(problems))
    n_classes = len(classes)
    model = DetectorModel(classes, images.shape[-1], seed=derive_seed(config.seed, "detector-init"))
    # stratified split so every class is present in validation when possible
    train_idx, val_idx = [], []
    for c in range(n_classes):
        idx = torch.nonzero(labels == c).squeeze(1)
        tr, va = _split(len(idx), config.val_fraction if len(idx) > 1 else 0.0, derive_seed(config.seed, "split", c))
        train_idx.append(idx[tr])
        val_idx.append(idx[va])
    train_idx = torch.cat(train_idx)
    val_idx = torch.cat(val_idx)

    weight = None
    if config.class_weighting:
        counts = torch.bincount(labels[train_idx], minlength=n_classes).float().clamp(min=1)
        weight = counts.sum() / (n_classes * counts)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch_generator(derive_seed(config.seed, "detector-batches"))
    best_score, best_state, stale, step = -math.inf, None, 0, 0
    for epoch in range(config.epochs):
        model.train()
        perm = train_idx[torch.randperm(len(train_idx), generator=gen)]
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            if len(idx) < 2:
                continue
            x = images[idx]
            if config.flip:
                mask = torch.rand(len(idx), generator=gen) < 0.5
                x = torch.where(mask[:, None, None, None], x.flip(-1), x)
            loss = F.cross_entropy(model(x), labels[idx], weight=weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite detector loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        score = _val_score(model, images[val_idx], labels[val_idx], n_classes) if len(val_idx) else float(epoch)
        log.debug("detector epoch %d val %.4f", epoch, score)
        if score > best_score:
            best_score, best_state, stale = score, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        if config.max_steps is not None and step >= config.max_steps:
            break
    model.load_state_dict(best_state)
    model.val_score = best_score
    return model.eval()


def _val_score(model, images, labels, n_classes) -> float:
    proba = model.predict_proba(images)
    if n_classes == 2 and labels.any() and not labels.all():
        # AP, with accuracy as tie-breaker among saturated epochs
        acc = (proba.argmax(1) == labels).double().mean().item()
        return average_precision(proba[:, 1].numpy(), labels.numpy()) + 1e-3 * acc
    return (proba.argmax(1) == labels).double().mean().item()


def _check_resolution(*tensors):
    shapes = {tuple(t.shape[1:]) for t in tensors}
    if len(shapes) != 1:
        raise InputError(f"image sets have different resolutions: {sorted(shapes)}")


def train_detector(real, fake, config: DetectorConfig | None = None) -> DetectorModel:
    """Binary real (class 0) vs fake (class 1) classifier."""
    config = config or DetectorConfig()
    r, f = as_images(real), as_images(fake)
    _check_resolution(r, f)
    images = torch.cat([r, f])
    labels = torch.cat([torch.zeros(len(r), dtype=torch.long), torch.ones(len(f), dtype=torch.long)])
    return _fit(images, labels, ("real", "fake"), config)


@dataclass
class DetectorMetrics:
    ap: float
    accuracy: float
    per_class: dict
    n_real: int
    n_fake: int
    scores_sha256: str = ""
    convention: str = AP_CONVENTION
    scores: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("scores")
        return d


def _precision_recall(pred, labels, c):
    tp = int(((pred == c) & (labels == c)).sum())
    n_pred = int((pred == c).sum())
    n_true = int((labels == c).sum())
    return {"precision": tp / n_pred if n_pred else 0.0, "recall": tp / n_true if n_true else 0.0}


def metrics_from_scores(scores, labels) -> DetectorMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (scores >= 0.5).astype(int)
    return DetectorMetrics(
        ap=average_precision(scores, labels),
        accuracy=float((pred == labels).mean()),
        per_class={name: _precision_recall(pred, labels, c) for c, name in enumerate(("real", "fake"))},
        n_real=int((labels == 0).sum()),
        n_fake=int((labels == 1).sum()),
        scores_sha256=hashlib.sha256(scores.tobytes()).hexdigest(),
        scores=scores.tolist(),
    )


def evaluate(model: DetectorModel, real, fake) -> DetectorMetrics:
    """AP and accuracy of the fake-class probability on a real/fake test set."""
    r, f = as_images(real), as_images(fake)
    _check_resolution(r, f)
    proba = model.predict_proba(torch.cat([r, f]))
    fake_col = model.classes.index("fake") if "fake" in model.classes else 1
    labels = np.r_[np.zeros(len(r), dtype=int), np.ones(len(f), dtype=int)]
    return metrics_from_scores(proba[:, fake_col].numpy(), labels)


def train_multidomain(manifests: dict, config: DetectorConfig | None = None) -> DetectorModel:
    """Softmax classifier over ``manifests`` (class name -> images), in insertion order."""
    config = config or DetectorConfig()
    if len(manifests) < 2:
        raise InputError("multi-domain classification needs at least two classes")
    sets = [as_images(v) for v in manifests.values()]
    _check_resolution(*sets)
    images = torch.cat(sets)
    labels = torch.cat([torch.full((len(s),), c, dtype=torch.long) for c, s in enumerate(sets)])
    return _fit(images, labels, tuple(manifests), config)


def evaluate_multidomain(model: DetectorModel, manifests: dict) -> dict:
    correct, total, per_class = 0, 0, {}
    for name, data in manifests.items():
        if name not in model.classes:
            raise InputError(f"class {name!r} unknown to the model ({model.classes})")
        x = as_images(data)
        pred = model.predict_proba(x).argmax(1)
        hits = int((pred == model.classes.index(name)).sum())
        per_class[name] = hits / len(x)
        correct += hits
        total += len(x)
    return {"accuracy": correct / total, "mean_class_accuracy": float(np.mean(list(per_class.values()))),
            "per_class": per_class}
