#!/usr/bin/env python3
"""
Checkpoints
===========

A checkpoint is the whole SearchState as versioned JSON: epoch, every weight,
alpha, both optimiser states, the RNG bit-generator state and the metric
history. Floats are written with their shortest round-trip repr, so
load(save(state)) reproduces every array bit for bit.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .bilevel_trainer import EpochMetrics, OptimizerState, SearchState
from .errors import IntegrityError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ArrayRecord(BaseModel):
    shape: Tuple[int, ...]
    data: List[float]

    @classmethod
    def of(cls, array: np.ndarray) -> "ArrayRecord":
        array = np.asarray(array, dtype=np.float64)
        return cls(shape=array.shape, data=array.ravel().tolist())

    def to_array(self) -> np.ndarray:
        return np.array(self.data, dtype=np.float64).reshape(self.shape)


class OptimizerRecord(BaseModel):
    kind: str
    lr: float
    momentum: float
    weight_decay: float
    betas: Tuple[float, float]
    eps: float
    steps: int
    velocity: Dict[str, ArrayRecord] = Field(default_factory=dict)
    second_moment: Dict[str, ArrayRecord] = Field(default_factory=dict)

    @classmethod
    def of(cls, state: OptimizerState) -> "OptimizerRecord":
        return cls(
            kind=state.kind, lr=state.lr, momentum=state.momentum, weight_decay=state.weight_decay,
            betas=state.betas, eps=state.eps, steps=state.steps,
            velocity={k: ArrayRecord.of(v) for k, v in state.velocity.items()},
            second_moment={k: ArrayRecord.of(v) for k, v in state.second_moment.items()},
        )

    def restore(self) -> OptimizerState:
        return OptimizerState(
            kind=self.kind, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            betas=tuple(self.betas), eps=self.eps, steps=self.steps,
            velocity={k: v.to_array() for k, v in self.velocity.items()},
            second_moment={k: v.to_array() for k, v in self.second_moment.items()},
        )


class Checkpoint(BaseModel):
    version: int = Field(..., description="Format version tag, checked on load")
    epoch: int = Field(..., ge=0)
    weights: Dict[str, ArrayRecord]
    alpha: ArrayRecord
    weight_opt: OptimizerRecord
    param_opt: OptimizerRecord
    rng_state: Dict[str, Any] = Field(..., description="numpy bit_generator.state")
    history: List[Tuple[int, float, float, float, float, float, float]] = Field(default_factory=list)


def checkpoint_path(run_dir: Path, epoch: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"epoch_{epoch}.json"


def to_checkpoint(state: SearchState) -> Checkpoint:
    return Checkpoint(
        version=FORMAT_VERSION,
        epoch=state.epoch,
        weights={k: ArrayRecord.of(v) for k, v in state.weights.items()},
        alpha=ArrayRecord.of(state.alpha),
        weight_opt=OptimizerRecord.of(state.weight_opt),
        param_opt=OptimizerRecord.of(state.param_opt),
        rng_state=state.rng.bit_generator.state,
        history=[tuple(m) for m in state.history],
    )


def from_checkpoint(ckpt: Checkpoint) -> SearchState:
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return SearchState(
        epoch=ckpt.epoch,
        weights={k: v.to_array() for k, v in ckpt.weights.items()},
        alpha=ckpt.alpha.to_array(),
        weight_opt=ckpt.weight_opt.restore(),
        param_opt=ckpt.param_opt.restore(),
        rng=rng,
        history=[EpochMetrics(*row) for row in ckpt.history],
    )


def save_checkpoint(run_dir: Path, state: SearchState) -> Path:
    path = checkpoint_path(run_dir, state.epoch)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_checkpoint(state).model_dump(mode="json")))
    logger.debug("saved checkpoint %s", path)
    return path


def _read(path: Path) -> Checkpoint:
    """Parse and validate; FileNotFoundError passes through for missing files"""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(raw, dict) or raw.get("version") != FORMAT_VERSION:
        found = raw.get("version") if isinstance(raw, dict) else None
        raise IntegrityError(f"checkpoint {path} has format version {found!r}, expected {FORMAT_VERSION}",
                             epoch=raw.get("epoch") if isinstance(raw, dict) else None)
    try:
        return Checkpoint.model_validate(raw)
    except ValidationError as exc:
        raise IntegrityError(f"malformed checkpoint {path}: {exc.error_count()} problem(s)", epoch=raw.get("epoch")) from None


def load_checkpoint(run_dir: Path, epoch: int) -> SearchState:
    ckpt = _read(checkpoint_path(run_dir, epoch))
    if ckpt.epoch != epoch:
        raise IntegrityError(f"checkpoint file for epoch {epoch} holds epoch {ckpt.epoch}", epoch=epoch)
    return from_checkpoint(ckpt)


def load_alpha(run_dir: Path, epoch: int) -> np.ndarray:
    """alpha at the end of ``epoch``; the rollback used by selective stop"""
    return _read(checkpoint_path(run_dir, epoch)).alpha.to_array()


def latest_epoch(run_dir: Path) -> int:
    epochs = [int(p.stem.split("_", 1)[1]) for p in (Path(run_dir) / "checkpoints").glob("epoch_*.json")]
    if not epochs:
        raise IntegrityError(f"no checkpoints under {run_dir}")
    return max(epochs)
