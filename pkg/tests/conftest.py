import os
from pathlib import Path

import pytest

from oneshot_gan.generator import GeneratorConfig, GeneratorModel
from oneshot_gan.perceptual import build_extractor


# Expensive shared assets (trained base generator, extractor, datasets,
# detectors) live here and are reused across test sessions.
BENCH_CACHE = Path(os.environ.get("ONESHOT_TEST_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "bench"))


@pytest.fixture
def mini_model():
    """8x8 generator with two resolution blocks (L = 4)."""
    return GeneratorModel(GeneratorConfig(resolution=8, style_dim=8, channels=(8, 4), mapping_layers=2), seed=3)


@pytest.fixture
def toy_model():
    return GeneratorModel(GeneratorConfig(resolution=32, style_dim=16, channels=(16, 16, 8, 8)), seed=5)


@pytest.fixture
def small_extractor():
    return build_extractor((4, 8), seed=1)


@pytest.fixture(scope="session")
def bench():
    from oneshot_gan.experiments.bench import BenchConfig, Workbench

    return Workbench(BENCH_CACHE, BenchConfig(seed=0))


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criteria outcomes, which are otherwise hidden by output capture."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail, secs = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({secs:.1f}s)  {detail}")
