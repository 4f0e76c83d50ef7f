import numpy as np
import pytest

from data import make_synthetic, write_ts, split_paths
from model import SmateConfig


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config():
    """Small enough that a training epoch takes milliseconds."""
    return SmateConfig(T=8, M=2, gru_dim=3, conv_filters=3, embed_dim=2, pool=2, epochs=3, seed=7)


@pytest.fixture
def synthetic():
    return make_synthetic(K=2, N=8, T=8, M=2, seed=3, name="Toy")


@pytest.fixture
def data_dir(tmp_path):
    """A UEA-style directory holding Toy_TRAIN.ts / Toy_TEST.ts."""
    root = tmp_path / "data"
    train_path, test_path = split_paths(root, "Toy")
    write_ts(make_synthetic(K=2, N=8, T=8, M=2, seed=3, name="Toy"), train_path)
    write_ts(make_synthetic(K=2, N=6, T=8, M=2, seed=4, name="Toy"), test_path)
    return root


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    monkeypatch.setenv("SMATE_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("SMATE_THREADS", raising=False)
