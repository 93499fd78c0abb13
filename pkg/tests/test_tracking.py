import numpy as np

from minidarts.bilevel_trainer import TrainConfig, new_state
from minidarts.search_space import init_alpha, init_weights
from minidarts.tracking import format_progress, notification_tracker, track_epochs


def test_notification_fires_once():
    is_new = notification_tracker()
    assert is_new("sc_2")
    assert not is_new("sc_2")
    assert is_new("rt_10")


def test_checks_fire_once_and_callbacks_run(tiny_spec, tiny_data):
    config = TrainConfig(total_epochs=3, batch_size=16)
    rng = np.random.default_rng(0)
    state = new_state(config, tiny_spec, init_weights(tiny_spec, rng), init_alpha(tiny_spec), rng)
    epochs, fired = [], []

    snaps = list(track_epochs(
        state, config, tiny_spec, tiny_data.train, tiny_data.val,
        checks={"always": lambda snap: True, "late": lambda snap: snap.epoch >= 2},
        on_epoch=lambda snap: epochs.append(snap.epoch),
        on_fired=lambda name, snap: fired.append((name, snap.epoch)),
    ))

    assert [s.epoch for s in snaps] == epochs == [1, 2, 3]
    assert [s.fired for s in snaps] == [("always",), ("late",), ()]
    assert fired == [("always", 1), ("late", 2)]
    snaps[0].alpha[0, 0] = 99.0
    assert state.alpha[0, 0] != 99.0
    assert "epoch    1" in format_progress(snaps[0], tiny_spec.op_set.names, np.full(5, 0.2))
