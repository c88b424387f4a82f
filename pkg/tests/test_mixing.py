import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oneshot_gan.corpus import DatasetManifest
from oneshot_gan.errors import InputError
from oneshot_gan.generator import StyleVector, generate_images
from oneshot_gan.mixing import MixConfig, generate_dataset, mix_batch, mix_styles


@st.composite
def style_pairs(draw):
    L = draw(st.sampled_from([4, 6, 8, 10]))
    D = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**31 - 1))
    g = torch.Generator().manual_seed(seed)
    s, s_I = torch.randn(L, D, generator=g), torch.randn(L, D, generator=g)
    k = draw(st.integers(0, L))
    return StyleVector(s), StyleVector(s_I), k


@settings(max_examples=200, deadline=None)
@given(style_pairs())
def test_suffix_exactness(pair):
    s, s_I, k = pair
    before = (s.layers.clone(), s_I.layers.clone())
    out = mix_styles(s, s_I, k)
    L = s.L
    assert torch.equal(out.layers[:L - k], s.layers[:L - k])
    assert torch.equal(out.layers[L - k:], s_I.layers[L - k:])
    assert torch.equal(s.layers, before[0]) and torch.equal(s_I.layers, before[1])


@settings(max_examples=100, deadline=None)
@given(style_pairs())
def test_self_mix_and_boundaries(pair):
    s, s_I, k = pair
    assert torch.equal(mix_styles(s, s, k).layers, s.layers)
    assert torch.equal(mix_styles(s, s_I, 0).layers, s.layers)
    assert torch.equal(mix_styles(s, s_I, s.L).layers, s_I.layers)


@settings(max_examples=50, deadline=None)
@given(style_pairs(), st.integers(1, 5))
def test_batch_matches_single(pair, n):
    s, s_I, k = pair
    batch = torch.stack([s.layers * (i + 1) for i in range(n)])
    mixed = mix_batch(batch, s_I, k)
    for i in range(n):
        assert torch.equal(mixed[i], mix_styles(StyleVector(batch[i]), s_I, k).layers)


def test_invalid_k_and_shapes():
    s = StyleVector.zeros(8, 4)
    with pytest.raises(InputError):
        mix_styles(s, s, 9)
    with pytest.raises(InputError):
        mix_styles(s, s, -1)
    with pytest.raises(InputError):
        mix_styles(s, StyleVector.zeros(8, 5), 2)
    assert MixConfig(k=9).problems(L=8)
    assert MixConfig(n=0).problems()


def test_dataset_manifest_and_grafting(tmp_path, toy_model):
    s_I = StyleVector(torch.randn(toy_model.L, toy_model.D))
    m = generate_dataset(toy_model, tmp_path / "d", MixConfig(k=3, n=12, seed=4, batch_size=5), s_I)
    m.verify()
    assert len(DatasetManifest.load(tmp_path / "d")) == 12
    assert all(r["k"] == 3 and r["label"] == "fake" for r in m.records)
    styles = np.load(tmp_path / "d" / "styles.npy")
    assert styles.shape == (12, toy_model.L, toy_model.D)
    assert (styles[:, -3:] == s_I.layers[-3:].numpy()).all()
    # the prefix layers are the unmixed ones
    _, plain, seeds = generate_images(toy_model, 12, 4, batch_size=5)
    assert np.array_equal(styles[:, :-3], plain[:, :-3].numpy())
    assert [r["seed"] for r in m.records] == seeds


def test_identity_preservation(toy_model):
    """With the same seed, mixed and unmixed images differ only through the final k layers."""
    s_I = StyleVector(torch.randn(toy_model.L, toy_model.D))
    mixed, st_mixed, _ = generate_images(toy_model, 3, 8, style_fn=lambda st_: mix_batch(st_, s_I, 3))
    regenerated, _, _ = generate_images(toy_model, 3, 8, style_fn=lambda st_: torch.cat(
        [st_[:, :-3], st_mixed[:, -3:]], dim=1))
    assert torch.equal(mixed, regenerated)


def test_full_override_differs_only_by_noise(toy_model):
    s_I = StyleVector(torch.randn(toy_model.L, toy_model.D))

    def render(strength):
        with torch.no_grad():
            for conv in toy_model.synthesis.convs:
                conv.noise_strength.fill_(strength)
        return generate_images(toy_model, 4, 0, style_fn=lambda st_: mix_batch(st_, s_I, toy_model.L))

    noisy, styles, _ = render(0.5)
    assert all(torch.equal(styles[i], styles[0]) for i in range(4))
    assert not torch.equal(noisy[1], noisy[0])
    quiet = render(0.0)[0]
    assert all(torch.equal(quiet[i], quiet[0]) for i in range(4))


def test_single_image_dataset_is_byte_identical(tmp_path, toy_model):
    cfg = MixConfig(k=3, n=1, seed=21)
    s_I = StyleVector(torch.randn(toy_model.L, toy_model.D, generator=torch.Generator().manual_seed(1)))
    a = generate_dataset(toy_model, tmp_path / "a", cfg, s_I)
    b = generate_dataset(toy_model, tmp_path / "b", cfg, s_I)
    assert (tmp_path / "a" / a.records[0]["path"]).read_bytes() == (tmp_path / "b" / b.records[0]["path"]).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_unmixed_dataset_records_k_zero(tmp_path, toy_model):
    m = generate_dataset(toy_model, tmp_path / "u", MixConfig(k=3, n=2, seed=0))
    assert all(r["k"] == 0 for r in m.records)
