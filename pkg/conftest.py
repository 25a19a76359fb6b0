import numpy as np
import pytest

from vit_model import ViTConfig, load_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return load_config("toy")


@pytest.fixture
def tiny_config():
    return load_config("toy-gradcheck")


@pytest.fixture
def deit_s():
    return load_config("deit-s")


@pytest.fixture
def vit_b():
    return load_config("vit-b")


@pytest.fixture
def mid_config():
    """Nine patches, three blocks: room for two drops."""
    return ViTConfig(image_size=12, patch_size=4, channels=2, embed_dim=8,
                     heads=2, ffn_mult=2, depth=3, num_classes=3)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("BSR_OUT_DIR", str(tmp_path / "bsr_out"))
    monkeypatch.setenv("BSR_THREADS", "1")
    return tmp_path / "bsr_out"
