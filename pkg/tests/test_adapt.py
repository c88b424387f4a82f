import json

import pytest
import torch

from oneshot_gan.adapt import (AdaptationResult, ProjectionConfig, ShiftConfig, adapt_one_shot, frozen, project,
                               select_parameters, shift)
from oneshot_gan.errors import InputError
from oneshot_gan.generator import StyleVector, synthesize
from oneshot_gan.perceptual import Distance, DistanceConfig


@pytest.fixture
def dist(small_extractor):
    return Distance(small_extractor)


def in_manifold_target(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    s_star = StyleVector(torch.randn(model.L, model.D, generator=g) * 0.5)
    return synthesize(model, s_star, model.make_noise(seed + 100))


def test_projection_reduces_loss_and_keeps_model(toy_model, dist):
    before = toy_model.weights_hash()
    target = in_manifold_target(toy_model)
    s, noise, trace = project(toy_model, target, dist, ProjectionConfig(max_iters=60), seed=1)
    assert min(trace) < trace[0]
    assert toy_model.weights_hash() == before
    assert all(p.requires_grad for p in toy_model.parameters())
    # returned style reproduces the best loss in the trace
    assert dist(synthesize(toy_model, s, noise), target).item() == pytest.approx(min(trace), rel=1e-4)


def test_projection_early_stop(toy_model, dist):
    target = in_manifold_target(toy_model)
    _, _, trace = project(toy_model, target, dist, ProjectionConfig(max_iters=500, tol=0.5, window=5), seed=1)
    assert len(trace) < 500


def test_projection_rejects_bad_target(toy_model, dist):
    with pytest.raises(InputError):
        project(toy_model, torch.zeros(3, 16, 16), dist)
    with pytest.raises(InputError):
        project(toy_model, torch.full((3, 32, 32), 2.0), dist)
    with pytest.raises(InputError):
        project(toy_model, torch.zeros(3, 32, 32), dist, ProjectionConfig(lr=0))


def test_shift_returns_copy_with_lower_loss(toy_model, dist):
    target = torch.zeros(3, 32, 32)
    target[0] = 0.4
    s = StyleVector.zeros(toy_model.L, toy_model.D)
    noise = toy_model.make_noise(0)
    before = toy_model.weights_hash()
    shifted = shift(toy_model, s, noise, target, dist, ShiftConfig(max_iters=30, lr=0.01))
    assert toy_model.weights_hash() == before
    assert shifted.weights_hash() != before
    final = dist(synthesize(shifted, s, noise), target).item()
    assert final <= shifted.loss_trace[0]
    assert final == pytest.approx(min(shifted.loss_trace), rel=1e-4)


def test_shift_only_touches_selected_groups(toy_model, dist):
    target = torch.zeros(3, 32, 32)
    s = StyleVector.zeros(toy_model.L, toy_model.D)
    shifted = shift(toy_model, s, toy_model.make_noise(0), target, dist,
                    ShiftConfig(max_iters=5, lr=0.01, groups=("synthesis.to_rgb",)))
    orig = dict(toy_model.named_parameters())
    for name, p in shifted.named_parameters():
        same = torch.equal(p, orig[name])
        assert same != name.startswith("synthesis.to_rgb")


def test_select_parameters():
    from oneshot_gan.generator import GeneratorModel

    m = GeneratorModel()
    assert set(select_parameters(m, ["mapping"])) == {n for n, _ in m.named_parameters() if n.startswith("mapping.")}
    with pytest.raises(InputError):
        select_parameters(m, ["discriminator"])


def test_frozen_restores_flags(toy_model):
    list(toy_model.parameters())[0].requires_grad_(False)
    flags = [p.requires_grad for p in toy_model.parameters()]
    with frozen(toy_model):
        assert not any(p.requires_grad for p in toy_model.parameters())
    assert [p.requires_grad for p in toy_model.parameters()] == flags


def test_adaptation_result_round_trip(tmp_path, toy_model, dist):
    target = in_manifold_target(toy_model, 3)
    res = adapt_one_shot(toy_model, target, dist, ProjectionConfig(max_iters=10), ShiftConfig(max_iters=5), seed=4)
    path = res.save(tmp_path / "a")
    loaded = AdaptationResult.load(tmp_path / "a")
    assert torch.equal(loaded.s_I.layers, res.s_I.layers)
    assert loaded.shifted_model.weights_hash() == res.shifted_model.weights_hash()
    assert all(torch.equal(a, b) for a, b in zip(loaded.noise.maps, res.noise.maps))
    summary = json.loads(path.read_text())
    assert summary["shifted_model_hash"] == res.shifted_model.weights_hash()
    assert summary["config"]["distance"] == DistanceConfig().to_dict()


def test_adaptation_is_deterministic(tmp_path, toy_model, dist):
    target = in_manifold_target(toy_model, 5)
    a = adapt_one_shot(toy_model, target, dist, ProjectionConfig(max_iters=10), ShiftConfig(max_iters=5), seed=9)
    b = adapt_one_shot(toy_model, target, dist, ProjectionConfig(max_iters=10), ShiftConfig(max_iters=5), seed=9)
    pa, pb = a.save(tmp_path / "a"), b.save(tmp_path / "b")
    assert pa.read_bytes() == pb.read_bytes()
