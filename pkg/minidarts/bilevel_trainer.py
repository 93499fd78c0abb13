#!/usr/bin/env python3
"""
Bilevel Trainer
===============

First-order alternating optimisation: for every minibatch pair, one step on
the architecture parameters (validation batch, weights frozen) followed by
one step on the supernet weights (training batch, parameters frozen).

Learning-rate schemes and the named presets of the exploratory experiments
live here too, so a run is fully described by one TrainConfig.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, DivergenceError, DomainError
from .search_space import SupernetSpec, loss_and_grads

logger = logging.getLogger(__name__)

# velocity accumulates raw gradients, lr applied on the update (v = mu v + g; theta -= lr v)
MOMENTUM_FORM = "heavy_ball"


class Schedule(BaseModel):
    """cosine(lr, lr_min) anneals over the run; constant(lr) holds"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["cosine", "constant"] = "constant"
    lr: float = Field(..., ge=0.0, description="Start (cosine) or fixed (constant) learning rate")
    lr_min: float = Field(default=0.0, ge=0.0, description="End value of a cosine schedule")

    @classmethod
    def cosine(cls, lr_max: float, lr_min: float = 0.0) -> "Schedule":
        return cls(kind="cosine", lr=lr_max, lr_min=lr_min)

    @classmethod
    def constant(cls, lr: float) -> "Schedule":
        return cls(kind="constant", lr=lr)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["sgd_momentum", "adaptive_moment"] = "sgd_momentum"
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    betas: Tuple[float, float] = (0.5, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)


class TrainConfig(BaseModel):
    """Everything that drives one search run"""
    model_config = ConfigDict(frozen=True)

    scheme_name: str = "baseline"
    total_epochs: int = Field(default=50, ge=1, description="T")
    warmup_epochs: int = Field(default=0, ge=0, description="Leading epochs with alpha frozen")
    weight_lr_schedule: Schedule = Schedule.cosine(0.025, 0.001)
    param_lr_schedule: Schedule = Schedule.constant(0.0003)
    weight_decay: float = Field(default=0.0005, ge=0.0, description="L2 on supernet weights")
    param_weight_decay: float = Field(default=0.001, ge=0.0, description="L2 on every alpha entry")
    weight_optimizer: OptimizerConfig = OptimizerConfig()
    param_optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    removed_ops: Tuple[str, ...] = Field(default=(), description="Candidates dropped from the op set")

    @model_validator(mode="after")
    def _warmup_inside_run(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < total_epochs ({self.total_epochs})")
        return self


# -- learning-rate schemes -------------------------------------------------------

def lr_at(schedule: Schedule, t: float, T: int) -> float:
    if t < 0 or t > T:
        raise DomainError(f"schedule position {t} outside [0, {T}]")
    if schedule.kind == "constant":
        return schedule.lr
    return schedule.lr_min + 0.5 * (schedule.lr - schedule.lr_min) * (1.0 + math.cos(math.pi * t / T))


_BASELINE = TrainConfig()
_SS_DARTS = TrainConfig(
    scheme_name="ss_darts",
    weight_lr_schedule=Schedule.cosine(0.003, 0.001),
    param_lr_schedule=Schedule.constant(0.001),
)


def _variant(base: TrainConfig, name: str, **changes) -> TrainConfig:
    return base.model_copy(update={"scheme_name": name, **changes})


PRESETS: Dict[str, TrainConfig] = {
    "baseline": _BASELINE,
    **{f"warmup_{k}": _variant(_BASELINE, f"warmup_{k}", warmup_epochs=k, total_epochs=k + 50) for k in (10, 20, 30)},
    "l2_0.005": _variant(_BASELINE, "l2_0.005", param_weight_decay=0.005),
    "l2_0.01": _variant(_BASELINE, "l2_0.01", param_weight_decay=0.01),
    "freeze100": _variant(_BASELINE, "freeze100", warmup_epochs=100, total_epochs=150),
    **{f"lr_{lr}": _variant(_BASELINE, f"lr_{lr}", param_lr_schedule=Schedule.constant(lr)) for lr in (0.001, 0.002, 0.003)},
    "ex_darts": _variant(
        _BASELINE, "ex_darts",
        weight_lr_schedule=_BASELINE.param_lr_schedule,
        param_lr_schedule=_BASELINE.weight_lr_schedule,
    ),
    "longrun": _variant(
        _BASELINE, "longrun",
        weight_lr_schedule=Schedule.constant(0.0003),
        param_lr_schedule=Schedule.constant(0.001),
        total_epochs=500,
    ),
    "no_skip": _variant(_BASELINE, "no_skip", removed_ops=("skip_connect",)),
    "ss_darts": _SS_DARTS,
    **{f"wlr_{lr}": _variant(_SS_DARTS, f"wlr_{lr}", weight_lr_schedule=Schedule.cosine(lr, 0.001)) for lr in (0.003, 0.009, 0.015)},
    "multispace": _variant(_BASELINE, "multispace", total_epochs=500),
}


def apply_scheme(name: str) -> TrainConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- optimisers ------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-group optimiser: hyperparameters plus one buffer per tensor"""
    kind: str
    lr: float
    momentum: float
    weight_decay: float
    betas: Tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    steps: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimiser settings lr={self.lr} momentum={self.momentum} wd={self.weight_decay}")

    @classmethod
    def from_config(cls, config: OptimizerConfig, lr: float, weight_decay: float) -> "OptimizerState":
        return cls(kind=config.kind, lr=lr, momentum=config.momentum, weight_decay=weight_decay,
                   betas=tuple(config.betas), eps=config.eps)


def _check_finite(grads: Dict[str, np.ndarray]) -> None:
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient for {name}")


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   state: OptimizerState) -> Dict[str, np.ndarray]:
    """One update of every tensor in ``params``; returns new arrays, buffers updated in place"""
    _check_finite(grads)
    state.steps += 1
    updated = {}
    for name, theta in params.items():
        g = grads[name] + state.weight_decay * theta
        if state.kind == "sgd_momentum":
            v = state.velocity.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.velocity[name] = v
            updated[name] = theta - state.lr * v
        else:
            beta1, beta2 = state.betas
            m = state.velocity.get(name, np.zeros_like(theta))
            s = state.second_moment.get(name, np.zeros_like(theta))
            m = beta1 * m + (1.0 - beta1) * g
            s = beta2 * s + (1.0 - beta2) * g * g
            state.velocity[name], state.second_moment[name] = m, s
            m_hat = m / (1.0 - beta1 ** state.steps)
            s_hat = s / (1.0 - beta2 ** state.steps)
            updated[name] = theta - state.lr * m_hat / (np.sqrt(s_hat) + state.eps)
    if logger.isEnabledFor(logging.DEBUG):
        norms = " ".join(f"{name}={np.linalg.norm(updated[name] - params[name]):.3e}" for name in params)
        logger.debug("%s step %d update norms: %s", state.kind, state.steps, norms)
    return updated


def step_weights(weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                 state: OptimizerState) -> Dict[str, np.ndarray]:
    return optimizer_step(weights, grads, state)


def step_params(alpha: np.ndarray, grad: np.ndarray, state: OptimizerState) -> np.ndarray:
    return optimizer_step({"alpha": alpha}, {"alpha": grad}, state)["alpha"]


# -- data and run state ----------------------------------------------------------

class Split(NamedTuple):
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


class EpochMetrics(NamedTuple):
    epoch: int
    lr_w: float
    lr_a: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class SearchState:
    """Everything a run owns; checkpoints serialise exactly this"""
    epoch: int
    weights: Dict[str, np.ndarray]
    alpha: np.ndarray
    weight_opt: OptimizerState
    param_opt: OptimizerState
    rng: np.random.Generator
    history: List[EpochMetrics] = field(default_factory=list)


def new_state(config: TrainConfig, spec: SupernetSpec,
              weights: Dict[str, np.ndarray], alpha: np.ndarray,
              rng: np.random.Generator) -> SearchState:
    T = config.total_epochs
    return SearchState(
        epoch=0,
        weights=weights,
        alpha=alpha,
        weight_opt=OptimizerState.from_config(
            config.weight_optimizer, lr_at(config.weight_lr_schedule, 0, T), config.weight_decay),
        param_opt=OptimizerState.from_config(
            config.param_optimizer, lr_at(config.param_lr_schedule, 0, T), config.param_weight_decay),
        rng=rng,
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _alternate(state: SearchState, spec: SupernetSpec, train: Split, val: Split,
               train_idx: np.ndarray, val_idx: np.ndarray, frozen: bool):
    """One alpha step on the val batch, then one weight step on the train batch"""
    val_step = loss_and_grads(spec, state.weights, state.alpha,
                              val.features[val_idx], val.labels[val_idx], wrt_alpha=not frozen)
    if not np.isfinite(val_step.loss):
        raise DivergenceError("non-finite validation loss")
    if not frozen:
        state.alpha = step_params(state.alpha, val_step.alpha_grad, state.param_opt)

    train_step = loss_and_grads(spec, state.weights, state.alpha,
                                train.features[train_idx], train.labels[train_idx], wrt_weights=True)
    if not np.isfinite(train_step.loss):
        raise DivergenceError("non-finite training loss")
    state.weights = step_weights(state.weights, train_step.weight_grads, state.weight_opt)
    return val_step, train_step


def epoch(state: SearchState, config: TrainConfig, spec: SupernetSpec,
          train: Split, val: Split) -> SearchState:
    """Run one epoch of strict alternation and append its metrics"""
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("training and validation splits must be non-empty")

    T, t = config.total_epochs, state.epoch
    state.weight_opt.lr = lr_at(config.weight_lr_schedule, t, T)
    state.param_opt.lr = lr_at(config.param_lr_schedule, t, T)
    frozen = t < config.warmup_epochs

    train_batches = _batches(len(train), config.batch_size, state.rng)
    val_batches = _batches(len(val), config.batch_size, state.rng)
    if not train_batches:
        raise ConfigError("an epoch needs at least one training batch")

    sums = np.zeros(4)
    counts = np.zeros(2)
    for k, train_idx in enumerate(train_batches):
        val_idx = val_batches[k % len(val_batches)]
        try:
            val_step, train_step = _alternate(state, spec, train, val, train_idx, val_idx, frozen)
        except DivergenceError as exc:
            if exc.epoch is not None:
                raise
            raise DivergenceError(f"{exc} in epoch {t + 1}", epoch=t + 1) from exc

        logger.debug("epoch %d batch %d train_loss=%.6f val_loss=%.6f", t + 1, k, train_step.loss, val_step.loss)
        nt, nv = len(train_idx), len(val_idx)
        sums += (train_step.loss * nt, train_step.accuracy * nt, val_step.loss * nv, val_step.accuracy * nv)
        counts += (nt, nv)

    state.epoch = t + 1
    metrics = EpochMetrics(
        epoch=state.epoch,
        lr_w=state.weight_opt.lr,
        lr_a=state.param_opt.lr,
        train_loss=float(sums[0] / counts[0]),
        train_acc=float(sums[1] / counts[0]),
        val_loss=float(sums[2] / counts[1]),
        val_acc=float(sums[3] / counts[1]),
    )
    state.history.append(metrics)
    logger.info(
        "epoch %d/%d lr_w=%.5g lr_a=%.5g train %.4f/%.3f val %.4f/%.3f",
        metrics.epoch, T, metrics.lr_w, metrics.lr_a,
        metrics.train_loss, metrics.train_acc, metrics.val_loss, metrics.val_acc,
    )
    return state
