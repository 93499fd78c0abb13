#!/usr/bin/env python3
"""
Epoch Stream Tracking
=====================

Turns a search run into a stream of immutable per-epoch snapshots.

Core idea: one NamedTuple + one generator. The caller decides what to do
with each snapshot (log it, checkpoint it, stop early) instead of the
training loop knowing about any of that.

Usage:
    for snap in track_epochs(state, config, spec, train, val,
                             checks={"sc_2": skip_check}):
        if "sc_2" in snap.fired:
            break
"""

import time
from typing import Callable, Dict, Iterator, NamedTuple, Optional, Tuple

import numpy as np

from .bilevel_trainer import EpochMetrics, SearchState, Split, TrainConfig, epoch
from .search_space import SupernetSpec


class EpochState(NamedTuple):
    """Snapshot after one finished epoch"""
    epoch: int
    metrics: EpochMetrics
    alpha: np.ndarray
    fired: Tuple[str, ...]
    elapsed: float


def notification_tracker():
    """Fire-once bookkeeping: True the first time an event name is seen"""
    notified = set()

    def is_new_event(event: str) -> bool:
        if event not in notified:
            notified.add(event)
            return True
        return False

    return is_new_event


def track_epochs(
    state: SearchState,
    config: TrainConfig,
    spec: SupernetSpec,
    train: Split,
    val: Split,
    *,
    checks: Optional[Dict[str, Callable[[EpochState], bool]]] = None,
    on_epoch: Optional[Callable[[EpochState], None]] = None,
    on_fired: Optional[Callable[[str, EpochState], None]] = None,
) -> Iterator[EpochState]:
    """
    Train from ``state.epoch`` up to T, yielding one EpochState per epoch.

    Every check is evaluated after each epoch; a check that returns True is
    reported in ``fired`` exactly once, on the epoch it first holds.
    """
    checks = checks or {}
    is_new = notification_tracker()
    start = time.perf_counter()

    while state.epoch < config.total_epochs:
        epoch(state, config, spec, train, val)
        snap = EpochState(
            epoch=state.epoch,
            metrics=state.history[-1],
            alpha=state.alpha.copy(),
            fired=(),
            elapsed=time.perf_counter() - start,
        )
        fired = tuple(name for name, check in checks.items() if check(snap) and is_new(name))
        snap = snap._replace(fired=fired)
        if on_epoch:
            on_epoch(snap)
        for name in fired:
            if on_fired:
                on_fired(name, snap)
        yield snap


def format_progress(snap: EpochState, op_names: Tuple[str, ...], magnitudes: np.ndarray) -> str:
    """One-line progress summary with the current magnitude leader"""
    m = snap.metrics
    leader = op_names[int(np.argmax(magnitudes))]
    line = (f"epoch {m.epoch:>4}  train {m.train_loss:.4f}/{m.train_acc:.3f}  "
            f"val {m.val_loss:.4f}/{m.val_acc:.3f}  leader {leader} ({magnitudes.max():.3f})")
    if snap.fired:
        line += "  fired: " + ", ".join(snap.fired)
    return line
