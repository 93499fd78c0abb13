import numpy as np
import pytest

from minidarts.bilevel_trainer import TrainConfig, apply_scheme, new_state
from minidarts.datasets import generate_dataset
from minidarts.errors import ConfigError
from minidarts.run_schema import DatasetSpec
from minidarts.search_space import SupernetSpec, init_alpha, init_weights
from minidarts.tracking import track_epochs


def test_same_seed_same_arrays():
    a = generate_dataset(DatasetSpec(seed=3), input_dim=8)
    b = generate_dataset(DatasetSpec(seed=3), input_dim=8)
    np.testing.assert_array_equal(a.train.features, b.train.features)
    np.testing.assert_array_equal(a.val.labels, b.val.labels)
    c = generate_dataset(DatasetSpec(seed=4), input_dim=8)
    assert not np.array_equal(a.features, c.features)


def test_split_sizes_and_class_coverage():
    data = generate_dataset(DatasetSpec(n_samples=101, classes=4), input_dim=6)
    assert len(data.train) + len(data.val) == 101
    assert abs(len(data.train) - len(data.val)) <= 4
    for split in (data.train, data.val):
        assert set(split.labels.tolist()) == {0, 1, 2, 3}
        assert split.features.shape[1] == 6


def test_spirals():
    data = generate_dataset(DatasetSpec(generator="two_spirals", classes=2, n_samples=200), input_dim=5)
    assert set(data.labels.tolist()) == {0, 1}
    assert data.features.shape == (200, 5)
    assert np.abs(data.features).max() < 2.0


@pytest.mark.parametrize("spec", [
    DatasetSpec(generator="two_spirals", classes=3),
    DatasetSpec(n_samples=7, classes=4),
    DatasetSpec(noise=-0.1),
    DatasetSpec.model_construct(generator="moons", n_samples=64, classes=2, noise=0.5, seed=0),
])
def test_rejected(spec):
    with pytest.raises(ConfigError):
        generate_dataset(spec, input_dim=4)


def test_noiseless_blobs_are_learnable():
    data = generate_dataset(DatasetSpec(n_samples=32, classes=2, noise=0.0, seed=2), input_dim=4)
    assert len(np.unique(data.features, axis=0)) == 2

    spec = SupernetSpec(nodes_per_cell=3, feature_dim=4, input_dim=4, classes=2)
    config = TrainConfig(total_epochs=40, batch_size=4)
    rng = np.random.default_rng(config.seed)
    state = new_state(config, spec, init_weights(spec, rng), init_alpha(spec), rng)
    last = None
    for snap in track_epochs(state, config, spec, data.train, data.val):
        last = snap
    assert last.metrics.val_acc == 1.0


@pytest.mark.slow
def test_separable_blobs_under_exchanged_rates():
    data = generate_dataset(DatasetSpec(n_samples=2000, classes=4, noise=0.0, seed=0), input_dim=16)
    spec = SupernetSpec(classes=4)
    config = apply_scheme("ex_darts")
    assert config.total_epochs == 50
    rng = np.random.default_rng(config.seed)
    state = new_state(config, spec, init_weights(spec, rng), init_alpha(spec), rng)
    last = None
    for snap in track_epochs(state, config, spec, data.train, data.val):
        last = snap
    assert last.epoch == 50
    assert last.metrics.train_acc >= 0.99
