import numpy as np
import pytest

from tests.helpers import tiny_env, tiny_train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cn_env():
    return tiny_env("CN")


@pytest.fixture
def md_train():
    return tiny_train("MD-MADDPG")


@pytest.fixture(autouse=True)
def isolated_runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("MEMSHARE_RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("MEMSHARE_LOG_LEVEL", "WARNING")
