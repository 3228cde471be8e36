import numpy as np
import pytest

from latentstain.synth import build_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small dataset shared by harness/CLI tests: 16 train / 8 test pairs."""
    root = tmp_path_factory.mktemp("tiny-data")
    manifest = build_dataset(16, 8, seed=7, out_dir=root)
    return manifest


@pytest.fixture(scope="session")
def tiny_teacher_state():
    """Untrained teacher weights in checkpoint form (enough for wiring tests)."""
    from latentstain.model import ModelGraph
    return ModelGraph("ihc_unimodal", seed=515).state()
