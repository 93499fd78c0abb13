#!/usr/bin/env python3
"""
Operation Magnitudes and Stop Criteria
======================================

m(t, o) is the softmax mass of operation o averaged over the N compound
edges at epoch t. The criteria here pick an epoch from a run:

    peak:<op>          epoch of the largest m(t, op)
    residual:<op>      epoch of the largest sum_j (m(t, op) - m(t, o_j))
    sc:<k>             first epoch whose derived cell has >= k skip_connects
    rt:<window>        first epoch whose learnable-op ranking held for `window` epochs

``early_stop_run`` evaluates one criterion online while training;
``selective_stop`` evaluates many after the run and rolls each back to the
checkpoint of its epoch.
"""

import logging
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .bilevel_trainer import SearchState, Split, TrainConfig
from .errors import ConfigError, DomainError, IntegrityError
from .search_space import Architecture, OperationSet, SupernetSpec, discretize, mixture_weights
from .tracking import EpochState, track_epochs

logger = logging.getLogger(__name__)

SKIP = "skip_connect"
NORMALIZATION_TOL = 1e-9


class MagnitudeTrace(NamedTuple):
    """values[t - 1] = m(t, .) for epochs t = 1..T, columns in op-set order"""
    op_names: Tuple[str, ...]
    values: np.ndarray

    @property
    def epochs(self) -> int:
        return self.values.shape[0]

    def column(self, op: str) -> np.ndarray:
        if op not in self.op_names:
            raise DomainError(f"unknown operation {op!r}; trace has {list(self.op_names)}")
        return self.values[:, self.op_names.index(op)]

    def check_normalized(self, tol: float = NORMALIZATION_TOL) -> None:
        sums = self.values.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > tol) or np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise DomainError(f"magnitude rows must be distributions (worst row sum {sums[np.argmax(np.abs(sums - 1))]!r})")


class StopCriterion(NamedTuple):
    kind: Literal["peak", "residual_peak", "skip_count", "rank_stable"]
    op: Optional[str] = None
    k: int = 2
    window: int = 10
    patience: int = 5

    @property
    def label(self) -> str:
        if self.kind == "peak":
            return f"peak_{self.op}"
        if self.kind == "residual_peak":
            return f"residual_{self.op}"
        if self.kind == "skip_count":
            return f"sc_{self.k}"
        return f"rt_{self.window}"

    @classmethod
    def parse(cls, text: str) -> "StopCriterion":
        """peak:<op>[:patience] | residual:<op>[:patience] | sc:<k> | rt:<window>"""
        parts = text.strip().split(":")
        head, args = parts[0], parts[1:]
        try:
            if head in ("peak", "residual") and 1 <= len(args) <= 2:
                patience = int(args[1]) if len(args) == 2 else 5
                if patience < 1:
                    raise ValueError
                return cls("peak" if head == "peak" else "residual_peak", op=args[0], patience=patience)
            if head == "sc" and len(args) == 1 and int(args[0]) >= 1:
                return cls("skip_count", k=int(args[0]))
            if head == "rt" and len(args) == 1 and int(args[0]) >= 1:
                return cls("rank_stable", window=int(args[0]))
        except ValueError:
            pass
        raise ConfigError(f"cannot parse stop criterion {text!r}")


def parse_criteria(text: str) -> List[StopCriterion]:
    return [StopCriterion.parse(item) for item in text.split(",") if item.strip()]


# -- magnitudes ----------------------------------------------------------------

def magnitude(alpha: np.ndarray, N: Optional[int] = None) -> np.ndarray:
    """m(t, .) = sum over edges of softmax(alpha_n) / N"""
    alpha = np.asarray(alpha, dtype=np.float64)
    N = alpha.shape[0] if N is None else N
    if alpha.ndim != 2 or alpha.shape[0] != N:
        raise DomainError(f"alpha shape {alpha.shape} does not hold {N} edges")
    return mixture_weights(alpha).sum(axis=0) / N


def magnitude_trace(alphas: Sequence[np.ndarray], op_names: Sequence[str]) -> MagnitudeTrace:
    values = np.array([magnitude(a) for a in alphas]).reshape(len(alphas), len(op_names))
    return MagnitudeTrace(op_names=tuple(op_names), values=values)


# -- criteria --------------------------------------------------------------------

def _first_argmax(scores: np.ndarray) -> int:
    if scores.size == 0:
        raise DomainError("criterion needs a non-empty trace")
    return int(np.argmax(scores)) + 1


def residual_scores(trace: MagnitudeTrace, op: str) -> np.ndarray:
    if len(trace.op_names) < 2:
        raise DomainError("the residual criterion needs at least two operations")
    mi = trace.column(op)
    i = trace.op_names.index(op)
    return sum(mi - trace.values[:, j] for j in range(len(trace.op_names)) if j != i)


def criterion_peak(trace: MagnitudeTrace, op: str) -> int:
    """Epoch (1-based) of the magnitude peak of ``op``; earliest on ties"""
    return _first_argmax(trace.column(op))


def criterion_residual_peak(trace: MagnitudeTrace, op: str) -> int:
    """Epoch (1-based) maximising the summed residuals of ``op`` over the others"""
    return _first_argmax(residual_scores(trace, op))


def criterion_skip_count(alpha: np.ndarray, spec: SupernetSpec, k: int) -> bool:
    if SKIP not in spec.op_set.names:
        raise DomainError("skip-connect criterion needs skip_connect in the operation set")
    return discretize(alpha, spec).count(SKIP) >= k


def learnable_ranking(alpha: np.ndarray, op_set: OperationSet) -> Tuple[Tuple[int, ...], ...]:
    """Per edge, learnable op indices ordered by decreasing alpha (stable on ties)"""
    learnable = [i for i, op in enumerate(op_set.ops) if op.learnable]
    ranking = []
    for row in np.asarray(alpha):
        order = sorted(learnable, key=lambda i: (-row[i], i))
        ranking.append(tuple(order))
    return tuple(ranking)


def criterion_rank_stable(rankings: Sequence[Tuple[Tuple[int, ...], ...]], window: int) -> bool:
    """True iff the last ``window`` rankings are identical; False with too little history"""
    if len(rankings) < window:
        return False
    tail = rankings[-window:]
    return all(r == tail[0] for r in tail)


# -- post-hoc epoch selection ------------------------------------------------------

def select_epoch(criterion: StopCriterion, trace: MagnitudeTrace,
                 alphas: Sequence[np.ndarray], spec: SupernetSpec) -> Tuple[int, bool]:
    """(epoch, fired) over a full run; sc/rt fall back to the last epoch"""
    if criterion.kind == "peak":
        return criterion_peak(trace, criterion.op), True
    if criterion.kind == "residual_peak":
        return criterion_residual_peak(trace, criterion.op), True
    rankings = []
    for t, alpha in enumerate(alphas, start=1):
        if criterion.kind == "skip_count":
            if criterion_skip_count(alpha, spec, criterion.k):
                return t, True
        else:
            rankings.append(learnable_ranking(alpha, spec.op_set))
            if criterion_rank_stable(rankings, criterion.window):
                return t, True
    return len(alphas), False


class StopDecision(NamedTuple):
    criterion: str
    epoch: int
    stopped_at: int
    fired: bool
    architecture: Architecture


def selective_stop(
    trace: MagnitudeTrace,
    alphas: Sequence[np.ndarray],
    load_alpha: Callable[[int], np.ndarray],
    criteria: Sequence[StopCriterion],
    spec: SupernetSpec,
) -> Dict[str, StopDecision]:
    """
    Multiple-points selective stop: pick each criterion's epoch over the whole
    run, roll back to that epoch's checkpoint and derive its architecture.
    """
    decisions: Dict[str, StopDecision] = {}
    for criterion in criteria:
        t, fired = select_epoch(criterion, trace, alphas, spec)
        try:
            alpha = load_alpha(t)
        except FileNotFoundError:
            raise IntegrityError(f"no checkpoint for epoch {t} (needed by {criterion.label})", epoch=t) from None
        arch = discretize(alpha, spec)
        if not fired:
            logger.warning("%s never fired; using the end-of-training architecture", criterion.label)
        logger.info("%s -> epoch %d: %s", criterion.label, t, arch.genotype())
        decisions[criterion.label] = StopDecision(criterion.label, t, trace.epochs, fired, arch)
    return decisions


# -- online early stop ---------------------------------------------------------------

def peak_watcher(op_index: int, patience: int, residual: bool = False):
    """
    Online peak rule: the running maximum is final once ``patience`` epochs
    pass without a strictly larger value. Returns (check, best) where best()
    gives (epoch, alpha) of the running maximum.
    """
    record = {"score": -np.inf, "epoch": 0, "alpha": None}

    def check(snap: EpochState) -> bool:
        m = magnitude(snap.alpha)
        score = len(m) * m[op_index] - m.sum() if residual else m[op_index]
        if score > record["score"]:
            record.update(score=score, epoch=snap.epoch, alpha=snap.alpha.copy())
        return snap.epoch - record["epoch"] >= patience

    def best() -> Tuple[int, np.ndarray]:
        return record["epoch"], record["alpha"]

    return check, best


def early_stop_run(
    state: SearchState,
    config: TrainConfig,
    spec: SupernetSpec,
    train: Split,
    val: Split,
    criterion: StopCriterion,
    *,
    on_epoch: Optional[Callable[[EpochState], None]] = None,
) -> StopDecision:
    """Train until ``criterion`` fires (or T) and derive the architecture"""
    best = None
    if criterion.kind in ("peak", "residual_peak"):
        check, best = peak_watcher(spec.op_set.index(criterion.op), criterion.patience,
                                   residual=criterion.kind == "residual_peak")
    elif criterion.kind == "skip_count":
        if SKIP not in spec.op_set.names:
            raise DomainError("skip-connect criterion needs skip_connect in the operation set")
        check = lambda snap: criterion_skip_count(snap.alpha, spec, criterion.k)  # noqa: E731
    else:
        rankings: List[Tuple[Tuple[int, ...], ...]] = []

        def check(snap: EpochState) -> bool:
            rankings.append(learnable_ranking(snap.alpha, spec.op_set))
            return criterion_rank_stable(rankings, criterion.window)

    last = None
    for snap in track_epochs(state, config, spec, train, val, checks={criterion.label: check}, on_epoch=on_epoch):
        last = snap
        if snap.fired:
            epoch_sel, alpha = best() if best else (snap.epoch, snap.alpha)
            logger.info("%s fired at epoch %d, selected epoch %d", criterion.label, snap.epoch, epoch_sel)
            return StopDecision(criterion.label, epoch_sel, snap.epoch, True, discretize(alpha, spec))

    logger.warning("%s never fired; deriving from the final parameters", criterion.label)
    final_epoch = last.epoch if last else state.epoch
    return StopDecision(criterion.label, final_epoch, final_epoch, False, discretize(state.alpha, spec))
