import numpy as np
import pytest

from minidarts.datasets import generate_dataset
from minidarts.run_schema import DatasetSpec, RunConfig, SupernetConfig
from minidarts.search_space import SupernetSpec

TINY_SUPERNET = SupernetConfig(nodes_per_cell=3, feature_dim=4, input_dim=4)
TINY_DATASET = DatasetSpec(n_samples=48, classes=3, noise=0.5, seed=1)


@pytest.fixture(autouse=True)
def _no_env_output(monkeypatch):
    monkeypatch.delenv("MINIDARTS_OUT", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return SupernetSpec(nodes_per_cell=3, feature_dim=4, input_dim=4, classes=3)


@pytest.fixture
def tiny_data():
    return generate_dataset(TINY_DATASET, input_dim=4)


def tiny_run_config(output_dir, preset="baseline", epochs=3, **train):
    return RunConfig(
        preset=preset,
        train={"total_epochs": epochs, "batch_size": 16, **train},
        supernet=TINY_SUPERNET,
        dataset=TINY_DATASET,
        output_dir=str(output_dir),
    )


@pytest.fixture
def tiny_config(tmp_path):
    return tiny_run_config(tmp_path / "run")
