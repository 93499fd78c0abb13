import json

import numpy as np
import pytest

from minidarts.bilevel_trainer import TrainConfig, epoch, new_state
from minidarts.checkpoints import (checkpoint_path, latest_epoch, load_alpha, load_checkpoint,
                                   save_checkpoint)
from minidarts.errors import IntegrityError
from minidarts.search_space import init_alpha, init_weights


@pytest.fixture
def trained(tiny_spec, tiny_data):
    config = TrainConfig(total_epochs=4, batch_size=16)
    rng = np.random.default_rng(config.seed)
    state = new_state(config, tiny_spec, init_weights(tiny_spec, rng), init_alpha(tiny_spec), rng)
    for _ in range(2):
        epoch(state, config, tiny_spec, tiny_data.train, tiny_data.val)
    return config, state


def test_round_trip_is_bit_exact(tmp_path, trained):
    _, state = trained
    save_checkpoint(tmp_path, state)
    loaded = load_checkpoint(tmp_path, 2)

    assert loaded.epoch == 2
    np.testing.assert_array_equal(loaded.alpha, state.alpha)
    assert loaded.weights.keys() == state.weights.keys()
    for name in state.weights:
        np.testing.assert_array_equal(loaded.weights[name], state.weights[name])
    for name in state.weight_opt.velocity:
        np.testing.assert_array_equal(loaded.weight_opt.velocity[name], state.weight_opt.velocity[name])
    assert loaded.param_opt.steps == state.param_opt.steps
    assert loaded.history == state.history
    np.testing.assert_array_equal(loaded.rng.random(5), state.rng.random(5))


def test_resumed_epoch_matches(tmp_path, trained, tiny_spec, tiny_data):
    config, state = trained
    save_checkpoint(tmp_path, state)
    loaded = load_checkpoint(tmp_path, 2)
    for s in (state, loaded):
        epoch(s, config, tiny_spec, tiny_data.train, tiny_data.val)
    np.testing.assert_array_equal(loaded.alpha, state.alpha)
    assert loaded.history == state.history


def test_load_alpha_and_latest(tmp_path, trained):
    _, state = trained
    save_checkpoint(tmp_path, state)
    np.testing.assert_array_equal(load_alpha(tmp_path, 2), state.alpha)
    assert latest_epoch(tmp_path) == 2


def test_no_checkpoints(tmp_path):
    with pytest.raises(IntegrityError):
        latest_epoch(tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_alpha(tmp_path, 7)


def test_version_mismatch(tmp_path, trained):
    _, state = trained
    path = save_checkpoint(tmp_path, state)
    raw = json.loads(path.read_text())
    raw["version"] = 99
    path.write_text(json.dumps(raw))
    with pytest.raises(IntegrityError) as info:
        load_checkpoint(tmp_path, 2)
    assert info.value.epoch == 2


def test_corrupt_file(tmp_path, trained):
    _, state = trained
    path = save_checkpoint(tmp_path, state)
    path.write_text(path.read_text()[:100])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path, 2)


def test_malformed_and_misplaced(tmp_path, trained):
    _, state = trained
    path = save_checkpoint(tmp_path, state)
    raw = json.loads(path.read_text())
    del raw["alpha"]
    path.write_text(json.dumps(raw))
    with pytest.raises(IntegrityError):
        load_alpha(tmp_path, 2)

    state.epoch = 3
    good = save_checkpoint(tmp_path, state)
    good.rename(checkpoint_path(tmp_path, 1))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path, 1)
