import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from oneshot_gan.detector import (DetectorConfig, DetectorModel, average_precision, evaluate, evaluate_multidomain,
                                  metrics_from_scores, train_detector, train_multidomain)
from oneshot_gan.errors import InputError


def ap_by_rank(labels_in_rank_order) -> float:
    """Mean over positives of the precision at that positive's rank (untied scores)."""
    hits, total = 0, 0.0
    for rank, y in enumerate(labels_in_rank_order, start=1):
        if y:
            hits += 1
            total += hits / rank
    return total / hits


def test_hand_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    # positive ranked second of two: precision 1/2
    assert average_precision([0.9, 0.1], [0, 1]) == pytest.approx(0.5)
    # 2 positives at the bottom of 3: (1/2 + 2/3) / 2
    assert average_precision([0.9, 0.5, 0.1], [0, 1, 1]) == pytest.approx(7 / 12)
    # all tied: one threshold, precision = prevalence
    assert average_precision([0.3] * 4, [1, 0, 0, 1]) == pytest.approx(0.5)


def test_requires_a_positive():
    with pytest.raises(InputError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(InputError):
        average_precision([0.1, 0.2], [0, 1, 1])


@pytest.mark.parametrize("n", range(1, 9))
def test_rank_enumeration_oracle(n):
    scores = np.linspace(1.0, 0.0, n)
    for pattern in itertools.product([0, 1], repeat=n):
        if not any(pattern):
            continue
        assert average_precision(scores, pattern) == pytest.approx(ap_by_rank(pattern), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=30))
def test_matches_sklearn_with_ties(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float) / 5
    labels = np.array([p[1] for p in pairs], dtype=int)
    if labels.sum() == 0:
        return
    assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), st.booleans()), min_size=2, max_size=20), st.randoms())
def test_tie_and_order_invariance(pairs, rnd):
    scores = np.array([p[0] for p in pairs]) / 1000
    labels = np.array([p[1] for p in pairs], dtype=int)
    if labels.sum() == 0:
        return
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    a = average_precision(scores, labels)
    assert 0 < a <= 1
    assert average_precision(scores[perm], labels[perm]) == pytest.approx(a, abs=1e-12)
    # any strictly increasing transform of the scores leaves AP unchanged
    assert average_precision(np.exp(3 * scores), labels) == pytest.approx(a, abs=1e-12)


def test_metrics_from_scores():
    m = metrics_from_scores([0.9, 0.2, 0.6, 0.4], [1, 0, 1, 1])
    assert m.n_real == 1 and m.n_fake == 3
    assert m.accuracy == pytest.approx(0.75)
    assert m.per_class["fake"]["recall"] == pytest.approx(2 / 3)
    assert m.convention == "step-interp-v1"
    assert "scores" not in m.to_dict()


def separable_sets(n=96, R=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    real = torch.rand(n, 3, R, R, generator=g) * 0.5 - 0.75
    fake = torch.rand(n, 3, R, R, generator=g) * 0.5 + 0.25
    return real, fake


def test_detector_separates_easy_sets(tmp_path):
    real, fake = separable_sets()
    cfg = DetectorConfig(epochs=3, batch_size=32, seed=1)
    det = train_detector(real, fake, cfg)
    r2, f2 = separable_sets(seed=5)
    m = evaluate(det, r2, f2)
    assert m.ap > 0.95
    det.save(tmp_path / "det")
    loaded = DetectorModel.load(tmp_path / "det")
    assert torch.allclose(loaded.predict_proba(r2), det.predict_proba(r2), atol=1e-6)
    assert loaded.embed(r2[:3]).shape == (3, det.widths[-1])


def test_detector_training_is_deterministic():
    real, fake = separable_sets(32)
    cfg = DetectorConfig(epochs=1, batch_size=16, seed=3)
    a = train_detector(real, fake, cfg).predict_proba(real)
    b = train_detector(real, fake, cfg).predict_proba(real)
    assert torch.equal(a, b)


def test_resolution_mismatch_rejected():
    with pytest.raises(InputError):
        train_detector(torch.zeros(4, 3, 16, 16), torch.zeros(4, 3, 8, 8), DetectorConfig(epochs=1))
    with pytest.raises(InputError):
        train_detector(torch.zeros(4, 3, 8, 8), torch.zeros(4, 3, 8, 8), DetectorConfig(epochs=0))


def test_multidomain():
    g = torch.Generator().manual_seed(0)
    sets = {name: torch.full((40, 3, 8, 8), v) + 0.05 * torch.randn(40, 3, 8, 8, generator=g)
            for name, v in [("real", -0.6), ("cast", 0.0), ("blur", 0.6)]}
    model = train_multidomain(sets, DetectorConfig(epochs=10, batch_size=20, val_fraction=0.0, seed=0))
    res = evaluate_multidomain(model, sets)
    assert model.classes == ["real", "cast", "blur"]
    assert res["accuracy"] > 0.9
    with pytest.raises(InputError):
        evaluate_multidomain(model, {"jpeg": sets["real"]})
