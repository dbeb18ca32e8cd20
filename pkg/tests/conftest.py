import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fosp import compositor  # noqa: E402
from fosp.config import ModelConfig  # noqa: E402
from fosp.runtime import tune_allocator  # noqa: E402

tune_allocator()

SMALL_CHANNELS = (16, 12, 8, 4)


@pytest.fixture
def small_model_config():
    return ModelConfig(channels=SMALL_CHANNELS, fuse_channels=8, inpainter_width=4)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def random_pyramid(size, channels=SMALL_CHANNELS, batch=1, seed=7, dtype=torch.float64, positive=False):
    g = torch.Generator().manual_seed(seed)
    feats = []
    for i, c in enumerate(channels, start=1):
        s = size // 2 ** (6 - i)
        f = torch.randn(batch, c, s, s, generator=g, dtype=dtype)
        feats.append(f.abs() + 0.1 if positive else f)
    return feats


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """The default synthetic desk set: 500 train / 100 test at 128 x 128, seed 0."""
    root = tmp_path_factory.mktemp("desk")
    compositor.build_dataset(root, 500, seed=0, split="train")
    compositor.build_dataset(root, 100, seed=0, split="test")
    return root


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    compositor.build_dataset(root, 60, seed=3, split="train")
    compositor.build_dataset(root, 20, seed=3, split="test")
    return root


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(k for k in results if k > 0):
        terminalreporter.write_line(results[n])
