#!/usr/bin/env python3
"""
Softmax Dynamics
================

A single softmax head driven by a loss gradient that is constant for t1
steps and then reversed. With momentum SGD, a larger learning rate pushes
the head further into the flat region of the softmax during phase one, so
it takes *longer* to come back during phase two.

One "epoch" here is one optimizer step. The reference setting
(x0 = [0.001, 0.001], dl/dy = [1, -1] then [-1, 1], t1 = 25, momentum 0.9)
restores after 34 steps at lr 0.001 and 44 steps at lr 0.01 under the
frozen update convention below.
"""

import itertools
import logging
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autodiff import softmax, softmax_jacobian
from .errors import ConventionNotFoundError, DivergenceError, DomainError

logger = logging.getLogger(__name__)

SignConvention = Literal["ascent", "descent"]
RestorationRule = Literal["both_within_init", "first_crossing", "l_inf_zero"]
MomentumVariant = Literal["heavy_ball", "lr_in_velocity"]

SIGN_CONVENTIONS: Tuple[str, ...] = ("ascent", "descent")
RESTORATION_RULES: Tuple[str, ...] = ("both_within_init", "first_crossing", "l_inf_zero")
MOMENTUM_VARIANTS: Tuple[str, ...] = ("heavy_ball", "lr_in_velocity")

REFERENCE_TARGETS: Tuple[Tuple[float, int], ...] = ((0.001, 34), (0.01, 44))

# First (lexicographic) combination reproducing every REFERENCE_TARGETS pair.
FROZEN_CONVENTION: Tuple[str, str, str] = ("ascent", "both_within_init", "heavy_ball")

L_INF_TOL = 1e-12


class DynamicsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    x0: Tuple[float, ...] = (0.001, 0.001)
    dl_dy_phase1: Tuple[float, ...] = (1.0, -1.0)
    dl_dy_phase2: Optional[Tuple[float, ...]] = Field(default=None, description="Defaults to -dl_dy_phase1")
    t1: int = Field(default=25, ge=0)
    lr: float = Field(default=0.001, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    max_steps: int = Field(default=500, ge=0, description="Phase-two step budget")
    sign_convention: SignConvention = FROZEN_CONVENTION[0]
    restoration_rule: RestorationRule = FROZEN_CONVENTION[1]
    momentum_variant: MomentumVariant = FROZEN_CONVENTION[2]

    @model_validator(mode="after")
    def _consistent_dims(self):
        d = len(self.x0)
        if d < 2:
            raise ValueError("softmax dynamics needs at least two entries")
        phase2 = self.phase2_gradient
        if len(self.dl_dy_phase1) != d or len(phase2) != d:
            raise ValueError("x0 and both loss gradients must share one length")
        return self

    @property
    def phase2_gradient(self) -> Tuple[float, ...]:
        if self.dl_dy_phase2 is None:
            return tuple(-g for g in self.dl_dy_phase1)
        return self.dl_dy_phase2

    @property
    def convention(self) -> Tuple[str, str, str]:
        return (self.sign_convention, self.restoration_rule, self.momentum_variant)


class Trajectory(NamedTuple):
    """Row t holds x^t, y^t = softmax(x^t) and the velocity after step t"""
    x: np.ndarray
    y: np.ndarray
    velocity: np.ndarray
    t1: int


def input_gradient(y: np.ndarray, dl_dy: np.ndarray) -> np.ndarray:
    """dl/dx = J(y)^T dl/dy"""
    return softmax_jacobian(y).T @ dl_dy


def run_two_phase(config: DynamicsConfig) -> Trajectory:
    x = np.array(config.x0, dtype=np.float64)
    v = np.zeros_like(x)
    g1 = np.array(config.dl_dy_phase1, dtype=np.float64)
    g2 = np.array(config.phase2_gradient, dtype=np.float64)
    sign = 1.0 if config.sign_convention == "ascent" else -1.0

    steps = config.t1 + config.max_steps
    xs, ys, vs = [x.copy()], [softmax(x)], [v.copy()]
    for t in range(steps):
        gx = input_gradient(ys[-1], g1 if t < config.t1 else g2)
        if config.momentum_variant == "heavy_ball":
            v = config.momentum * v + gx
            x = x + sign * config.lr * v
        else:
            v = config.momentum * v - config.lr * gx
            x = x - sign * v
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"trajectory went non-finite at step {t + 1}", step=t + 1)
        xs.append(x.copy())
        ys.append(softmax(x))
        vs.append(v.copy())
    return Trajectory(np.array(xs), np.array(ys), np.array(vs), config.t1)


def _restored(x: np.ndarray, x0: np.ndarray, travel: np.ndarray, rule: str) -> bool:
    if rule == "l_inf_zero":
        return float(np.max(np.abs(x - x0))) <= L_INF_TOL
    if rule == "first_crossing":
        if not np.any(travel > 0.0):
            return True
        risen = int(np.argmax(travel))
        return x[risen] <= x0[risen]
    return bool(np.all((x - x0) * np.sign(travel) <= 0.0))


def restoration_epoch(trajectory: Trajectory, rule: str) -> int:
    """Phase-two steps until x^{t1 + s} is back at x^0 under ``rule``"""
    if rule not in RESTORATION_RULES:
        raise DomainError(f"unknown restoration rule {rule!r}")
    x0, t1 = trajectory.x[0], trajectory.t1
    if trajectory.x.shape[0] <= t1:
        raise DomainError("trajectory does not reach phase two")
    travel = trajectory.x[t1] - x0
    for s, x in enumerate(trajectory.x[t1:]):
        if _restored(x, x0, travel, rule):
            return s
    raise DomainError(f"not restored under {rule} within {trajectory.x.shape[0] - 1 - t1} phase-two steps")


def restoration_for(config: DynamicsConfig) -> int:
    return restoration_epoch(run_two_phase(config), config.restoration_rule)


class SweepReport(NamedTuple):
    targets: Tuple[Tuple[float, int], ...]
    results: Dict[Tuple[str, str, str], List[Optional[int]]]
    matches: List[Tuple[str, str, str]]

    @property
    def frozen(self) -> Tuple[str, str, str]:
        return self.matches[0]

    def to_json(self) -> dict:
        return {
            "targets": [list(t) for t in self.targets],
            "results": [{"convention": list(k), "t2": v} for k, v in self.results.items()],
            "matches": [list(m) for m in self.matches],
            "frozen": list(self.frozen),
        }


def convention_sweep(targets: Sequence[Tuple[float, int]] = REFERENCE_TARGETS,
                     base: Optional[DynamicsConfig] = None) -> SweepReport:
    """
    Try every sign convention x restoration rule x momentum variant and keep
    those that reproduce every (lr, t2) target. Matches are sorted, so the
    first one is the frozen choice.
    """
    base = base or DynamicsConfig()
    targets = tuple((float(lr), int(t2)) for lr, t2 in targets)
    results: Dict[Tuple[str, str, str], List[Optional[int]]] = {}
    for combo in itertools.product(SIGN_CONVENTIONS, RESTORATION_RULES, MOMENTUM_VARIANTS):
        sign, rule, variant = combo
        row: List[Optional[int]] = []
        for lr, _ in targets:
            cfg = base.model_copy(update={"lr": lr, "sign_convention": sign,
                                          "restoration_rule": rule, "momentum_variant": variant})
            try:
                row.append(restoration_for(cfg))
            except DomainError:
                row.append(None)
        results[combo] = row
        logger.debug("convention %s -> %s", combo, row)

    matches = sorted(c for c, row in results.items() if row == [t2 for _, t2 in targets])
    if not matches:
        raise ConventionNotFoundError(f"no convention reproduces {targets}", nearest=results)
    logger.info("convention sweep: %d match(es), frozen %s", len(matches), matches[0])
    return SweepReport(targets, results, matches)


def lr_sweep(lrs: Sequence[float], base: Optional[DynamicsConfig] = None) -> List[Tuple[float, int]]:
    base = base or DynamicsConfig()
    return [(lr, restoration_for(base.model_copy(update={"lr": float(lr)}))) for lr in lrs]


# -- Jacobian magnitude analysis --------------------------------------------------

def abs_jacobian_row(y: np.ndarray, i: int) -> np.ndarray:
    """|dy/dx_i| entrywise"""
    return np.abs(softmax_jacobian(y)[:, i])


def abs_jacobian_row_slopes(y: np.ndarray, i: int) -> np.ndarray:
    """d|dy/dx_i|_j / dy_i along sum(y) = 1: 1 - 2 y_i on the diagonal, y_j - y_i elsewhere"""
    y = np.asarray(y, dtype=np.float64)
    slopes = y - y[i]
    slopes[i] = 1.0 - 2.0 * y[i]
    return slopes


def jacobian_magnitude_profile(grid_size: int = 99) -> np.ndarray:
    """Rows (y_1, L1 norm of |dy/dx_1|) for a two-entry softmax on an open grid of (0, 1)"""
    grid = np.arange(1, grid_size + 1) / (grid_size + 1)
    norms = [abs_jacobian_row(np.array([y, 1.0 - y]), 0).sum() for y in grid]
    return np.column_stack([grid, norms])
