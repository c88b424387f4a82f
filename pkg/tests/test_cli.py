import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from filelock import FileLock
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oneshot_gan.cli.config import PipelineConfig, config_from_dict, load_config, loads
from oneshot_gan.cli.ingest import IngestSpec, crop_box, ingest
from oneshot_gan.cli.main import EXIT_BUSY, EXIT_CONFIG, EXIT_INPUT, main
from oneshot_gan.corpus import DatasetManifest, render_faces
from oneshot_gan.errors import ConfigError, InputError
from oneshot_gan.imaging import from_uint8, save_png

TINY = """
version = 1
seed = 3
resolution = 8
fixture = "colorcast"

[corpus]
size = 64
n_real_train = 40
n_real_test = 20
n_target_test = 20
n_target_pool = 20

[generator]
resolution = 8
style_dim = 8
channels = [8, 8]

[training]
steps = 8
batch_size = 8
log_every = 0

[extractor]
steps = 5

[projection]
max_iters = 6

[shift]
max_iters = 4

[mix]
k = 2
n = 30

[detector]
epochs = 1
batch_size = 16
"""


# -- config ---------------------------------------------------------------------------

def test_defaults_round_trip():
    cfg = PipelineConfig()
    again = loads(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(0, 8), lam=st.floats(0, 100, allow_nan=False),
       lr=st.floats(1e-6, 1.0), groups=st.lists(st.sampled_from(["synthesis", "mapping", "synthesis.to_rgb"]),
                                                 min_size=1, max_size=3, unique=True),
       fixture=st.sampled_from(["colorcast", "blur", "jpeg"]))
def test_round_trip_property(seed, k, lam, lr, groups, fixture):
    raw = {"seed": seed, "fixture": fixture, "mix": {"k": k}, "distance": {"lam": lam},
           "shift": {"lr": lr, "groups": groups}}
    cfg = config_from_dict(raw)
    text = cfg.dumps()
    assert loads(text) == cfg
    assert loads(text).dumps() == text


def test_validation_lists_every_problem():
    text = """
seed = "zero"
colour = 1
[mix]
k = 42
n = 0
[shift]
lr = -1.0
max_iters = 0
[projection]
window = 0
[training]
steps = 0
[detector]
epochs = 0
[extras]
x = 1
"""
    with pytest.raises(ConfigError) as err:
        loads(text)
    problems = "\n".join(err.value.problems)
    for needle in ("seed", "colour", "mix.k", "mix.n", "shift.lr", "shift.max_iters", "projection.window",
                   "training", "detector.epochs", "extras"):
        assert needle in problems, needle


def test_unknown_section_key_and_type():
    with pytest.raises(ConfigError) as err:
        loads("[generator]\nstyle_dim = 'wide'\nwidth = 3\n")
    assert len(err.value.problems) == 2
    with pytest.raises(ConfigError):
        loads("version = 2\n")
    with pytest.raises(ConfigError):
        loads("resolution = 16\n")  # generator.resolution stays 32
    with pytest.raises(ConfigError):
        loads("not toml [")


def test_output_root_env_override(monkeypatch, tmp_path):
    cfg = loads(TINY)
    monkeypatch.setenv("ONESHOT_OUTPUT_ROOT", str(tmp_path / "env"))
    assert cfg.output_root == tmp_path / "env"
    monkeypatch.delenv("ONESHOT_OUTPUT_ROOT")
    assert cfg.output_root == Path("runs/default")


# -- ingest ---------------------------------------------------------------------------

def test_crop_box_oracle():
    # side 20 * 1.3 = 26 about center (20, 20)
    assert crop_box((10, 10, 20, 20), 1.3, 100, 100) == pytest.approx((7, 7, 33, 33))


def test_crop_box_clamps_and_rejects_degenerate():
    assert crop_box((0, 0, 20, 20), 1.3, 100, 100) == pytest.approx((0, 0, 23, 23))
    assert crop_box((90, 90, 20, 20), 1.0, 100, 100) == pytest.approx((90, 90, 100, 100))
    with pytest.raises(InputError):
        crop_box((10, 10, 0, 5), 1.3, 100, 100)
    with pytest.raises(InputError):
        crop_box((200, 200, 5, 5), 1.3, 100, 100)
    with pytest.raises(InputError):
        IngestSpec("x.png", scale=0.9)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0, 80), y=st.floats(0, 80), w=st.floats(1, 60), h=st.floats(1, 60), scale=st.floats(1, 3))
def test_crop_box_properties(x, y, w, h, scale):
    x0, y0, x1, y1 = crop_box((x, y, w, h), scale, 100, 100)
    assert 0 <= x0 < x1 <= 100 and 0 <= y0 < y1 <= 100
    if x - w * (scale - 1) / 2 >= 0 and x + w * (scale + 1) / 2 <= 100:
        assert (x0 + x1) / 2 == pytest.approx(x + w / 2)
        assert x1 - x0 == pytest.approx(w * scale)


def test_ingest_full_frame_identity(tmp_path):
    img = render_faces(1, 16, seed=0)[0][0]
    save_png(img, tmp_path / "f.png")
    out = ingest(IngestSpec(tmp_path / "f.png", resolution=16))
    assert torch.equal(out, img)


def test_ingest_box_crop(tmp_path):
    arr = np.zeros((64, 64, 3), dtype=np.uint8)
    arr[16:48, 16:48] = 255
    Image.fromarray(arr).save(tmp_path / "sq.png")
    out = ingest(IngestSpec(tmp_path / "sq.png", box=(16, 16, 32, 32), scale=1.0, resolution=8))
    # the antialiasing filter reaches one source pixel past the box edge
    assert torch.allclose(out[:, 1:-1, 1:-1], torch.ones(3, 6, 6))
    assert out.mean() > 0.8
    out = ingest(IngestSpec(tmp_path / "sq.png", box=(16, 16, 32, 32), scale=2.0, resolution=8))
    assert out.shape == (3, 8, 8)
    assert out[:, 0, 0].max() < -0.9 and out[:, 4, 4].min() > 0.9
    with pytest.raises(InputError):
        ingest(IngestSpec(tmp_path / "missing.png"))


# -- commands -------------------------------------------------------------------------

@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(TINY)
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


def test_pipeline_commands(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    code, res, err = run(capsys, "train-base", "--config", cfg_path, "--output", out)
    assert code == 0, err
    for sub in ("config.snapshot", "checkpoints", "datasets", "reports", "logs"):
        assert (out / sub).exists()
    assert load_config(out / "config.snapshot") == loads(TINY)
    assert json.loads((out / "logs" / "train-base-result.json").read_text()) == res

    target = tmp_path / "t.png"
    save_png(render_faces(1, 8, seed=99)[0][0], target)
    target_bytes = target.read_bytes()
    code, a1, err = run(capsys, "adapt", "--config", cfg_path, "--output", out, "--target", target,
                        "--seed", 7, "--name", "one")
    assert code == 0, err
    code, a2, _ = run(capsys, "adapt", "--config", cfg_path, "--output", out, "--target", target,
                      "--seed", 7, "--name", "two")
    assert a1["adaptation_sha256"] == a2["adaptation_sha256"]
    assert target.read_bytes() == target_bytes

    code, g, err = run(capsys, "generate", "--config", cfg_path, "--output", out, "--n", 100,
                       "--adaptation", out / "adapt" / "one", "--name", "fake")
    assert code == 0, err
    m = DatasetManifest.load(out / "datasets" / "fake")
    assert len(m) == 100 and g["n"] == 100 and g["k"] == 2
    m.verify()
    code, g2, _ = run(capsys, "generate", "--config", cfg_path, "--output", out, "--n", 100,
                      "--adaptation", out / "adapt" / "two", "--name", "fake2")
    assert code == 0 and g2["n"] == 100
    code, base, _ = run(capsys, "generate", "--config", cfg_path, "--output", out, "--n", 40, "--name", "plain")
    assert base["k"] == 0

    real = out / "datasets" / "real_train"
    code, _, err = run(capsys, "experiment", "--config", cfg_path, "--output", out, "table2")
    assert code == 0, err
    assert (out / "reports" / "table2" / "report.json").exists()
    code, d, err = run(capsys, "train-detector", "--config", cfg_path, "--output", out,
                       "--real", real, "--fake", out / "datasets" / "fake", "--name", "adapted")
    assert code == 0, err
    code, e, err = run(capsys, "evaluate", "--config", cfg_path, "--output", out, "--detector", d["detector"],
                       "--real", out / "datasets" / "real_test", "--fake", out / "datasets" / "target_test-colorcast")
    assert code == 0, err
    assert 0 < e["metrics"]["ap"] <= 1
    code, emb, err = run(capsys, "embed", "--config", cfg_path, "--output", out, "--detector", d["detector"],
                         "--set", f"adapted={out / 'datasets' / 'fake'}", "--set", f"plain={out / 'datasets' / 'plain'}",
                         "--pair", "adapted,plain")
    assert code == 0, err
    assert emb["n_points"] == 140
    lines = Path(emb["embeddings"]).read_text().splitlines()
    assert lines[0].split("\t") == ["x", "y", "label", "path"] and len(lines) == 141


def test_generate_is_reproducible(tmp_path, cfg_path, capsys):
    hashes = []
    for name in ("a", "b"):
        code, res, err = run(capsys, "generate", "--config", cfg_path, "--output", tmp_path / name, "--n", 10)
        assert code == 0, err
        hashes.append((res["manifest_sha256"], res["styles_sha256"]))
    assert hashes[0] == hashes[1]


def test_env_var_sets_run_directory(tmp_path, cfg_path, capsys, monkeypatch):
    monkeypatch.setenv("ONESHOT_OUTPUT_ROOT", str(tmp_path / "from-env"))
    code, _, err = run(capsys, "generate", "--config", cfg_path, "--n", 2)
    assert code == 0, err
    assert (tmp_path / "from-env" / "datasets" / "generated" / "manifest.jsonl").exists()


def test_config_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[mix]\nk = 99\nn = 0\n[shift]\nlr = 0.0\n")
    code, _, err = run(capsys, "train-base", "--config", bad, "--output", tmp_path / "o")
    assert code == EXIT_CONFIG
    assert "mix.k" in err and "mix.n" in err and "shift.lr" in err
    code, _, err = run(capsys, "train-base", "--config", tmp_path / "nope.toml")
    assert code == EXIT_CONFIG


def test_missing_inputs_are_reported(tmp_path, cfg_path, capsys):
    code, _, err = run(capsys, "adapt", "--config", cfg_path, "--output", tmp_path / "o",
                       "--target", tmp_path / "none.png")
    assert code == EXIT_CONFIG and "--target" in err
    (tmp_path / "junk.png").write_bytes(b"junk")
    code, _, err = run(capsys, "adapt", "--config", cfg_path, "--output", tmp_path / "o",
                       "--target", tmp_path / "junk.png")
    assert code == EXIT_INPUT


def test_lock_prevents_concurrent_writers(tmp_path, cfg_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    with FileLock(str(out / ".lock")):
        code, _, err = run(capsys, "generate", "--config", cfg_path, "--output", out, "--n", 2)
    assert code == EXIT_BUSY and "lock" in err


def test_console_entry_point_help():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
