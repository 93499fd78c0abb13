#!/usr/bin/env python3
"""
Experiment Harness
==================

Everything between a RunConfig and files on disk:

    run_search      train, writing metrics/magnitude/alpha CSVs, checkpoints
                    and a manifest into the run directory
    resume_search   continue a run from its newest checkpoint
    derive          selective stop from disk alone (manifest + CSVs + checkpoints)
    run_seeds       the same config over several seeds, optionally in worker processes
    run_gradcheck   randomized finite-difference check of the supernet gradients

CSV floats use the shortest repr that round-trips, so a rerun with the same
config and seed writes byte-identical files.
"""

import asyncio
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .autodiff import finite_diff_grad, relative_error
from .bilevel_trainer import EpochMetrics, SearchState, TrainConfig, new_state
from .checkpoints import latest_epoch, load_alpha, load_checkpoint, save_checkpoint
from .datasets import SyntheticDataset, generate_dataset
from .errors import DomainError, IntegrityError
from .magnitude_stop import (MagnitudeTrace, StopCriterion, StopDecision, early_stop_run,
                             magnitude, selective_stop)
from .run_schema import RunConfig
from .search_space import SupernetSpec, init_alpha, init_weights, loss_and_grads
from .softmax_dynamics import SweepReport, Trajectory
from .tracking import EpochState, track_epochs

logger = logging.getLogger(__name__)

OUT_ENV = "MINIDARTS_OUT"
METRICS_CSV = "metrics.csv"
MAGNITUDES_CSV = "magnitudes.csv"
ALPHAS_CSV = "alphas.csv"
MANIFEST = "manifest.json"
SUMMARY = "summary.json"

# presets evaluated with the residual criterion by default
RESIDUAL_DEFAULT_PRESETS = ("ss_darts", "wlr_0.003", "wlr_0.009", "wlr_0.015")


def fmt(x: float) -> str:
    return repr(float(x))


def resolve_run_dir(output_dir: str) -> Path:
    """Relative run directories live under $MINIDARTS_OUT when it is set"""
    path = Path(output_dir)
    root = os.environ.get(OUT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# -- run files ---------------------------------------------------------------------

def _write_rows(path: Path, rows: Sequence[Sequence[str]], mode: str = "a") -> None:
    with open(path, mode, newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _read_rows(path: Path) -> Tuple[List[str], List[List[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise IntegrityError(f"missing run file {path}") from None
    if not rows:
        raise IntegrityError(f"empty run file {path}")
    return rows[0], rows[1:]


def _init_csvs(run_dir: Path, op_names: Sequence[str]) -> None:
    _write_rows(run_dir / METRICS_CSV, [list(EpochMetrics._fields)], "w")
    _write_rows(run_dir / MAGNITUDES_CSV, [["epoch", *op_names]], "w")
    _write_rows(run_dir / ALPHAS_CSV, [["epoch", "edge", *op_names]], "w")


def _append_epoch(run_dir: Path, snap: EpochState) -> None:
    m = snap.metrics
    _write_rows(run_dir / METRICS_CSV, [[str(m.epoch), *(fmt(v) for v in m[1:])]])
    _write_rows(run_dir / MAGNITUDES_CSV, [[str(snap.epoch), *(fmt(v) for v in magnitude(snap.alpha))]])
    _write_rows(run_dir / ALPHAS_CSV,
                [[str(snap.epoch), str(n), *(fmt(v) for v in row)] for n, row in enumerate(snap.alpha)])


def _truncate(path: Path, epochs: int) -> None:
    header, rows = _read_rows(path)
    _write_rows(path, [header, *(r for r in rows if int(r[0]) <= epochs)], "w")


def write_manifest(run_dir: Path, config: RunConfig, train: TrainConfig, spec: SupernetSpec) -> Path:
    manifest = {
        "version": __version__,
        "seed": train.seed,
        "config": config.model_dump(mode="json"),
        "train": train.model_dump(mode="json"),
        "spec": spec.model_dump(mode="json"),
    }
    path = run_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2))
    return path


class Manifest(NamedTuple):
    config: RunConfig
    train: TrainConfig
    spec: SupernetSpec


def read_manifest(run_dir: Path) -> Manifest:
    try:
        raw = json.loads((Path(run_dir) / MANIFEST).read_text())
    except FileNotFoundError:
        raise IntegrityError(f"{run_dir} has no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt {MANIFEST} in {run_dir}: {exc}") from None
    return Manifest(
        RunConfig.model_validate(raw["config"]),
        TrainConfig.model_validate(raw["train"]),
        SupernetSpec.model_validate(raw["spec"]),
    )


def read_trace(run_dir: Path) -> MagnitudeTrace:
    header, rows = _read_rows(Path(run_dir) / MAGNITUDES_CSV)
    values = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
    return MagnitudeTrace(op_names=tuple(header[1:]), values=values)


def read_alphas(run_dir: Path, spec: SupernetSpec) -> List[np.ndarray]:
    _, rows = _read_rows(Path(run_dir) / ALPHAS_CSV)
    by_epoch: Dict[int, List[List[float]]] = {}
    for r in rows:
        by_epoch.setdefault(int(r[0]), []).append([float(v) for v in r[2:]])
    alphas = [np.array(by_epoch[t]) for t in sorted(by_epoch)]
    if any(a.shape != (spec.N, spec.op_set.M) for a in alphas):
        raise IntegrityError(f"{ALPHAS_CSV} rows do not match ({spec.N}, {spec.op_set.M})")
    return alphas


def read_metrics(run_dir: Path) -> List[EpochMetrics]:
    _, rows = _read_rows(Path(run_dir) / METRICS_CSV)
    return [EpochMetrics(int(r[0]), *(float(v) for v in r[1:])) for r in rows]


# -- search ------------------------------------------------------------------------

class RunResult(NamedTuple):
    run_dir: Path
    train: TrainConfig
    spec: SupernetSpec
    state: SearchState
    decision: Optional[StopDecision] = None


def _dataset(config: RunConfig, spec: SupernetSpec) -> SyntheticDataset:
    return generate_dataset(config.dataset, input_dim=spec.input_dim)


def _train_loop(run_dir: Path, config: RunConfig, train: TrainConfig, spec: SupernetSpec,
                state: SearchState, on_epoch: Optional[Callable[[EpochState], None]],
                early_stop: Optional[StopCriterion] = None) -> RunResult:
    data = _dataset(config, spec)
    T = train.total_epochs

    def record(snap: EpochState) -> None:
        _append_epoch(run_dir, snap)
        if snap.epoch % config.checkpoint_every == 0 or snap.epoch == T:
            save_checkpoint(run_dir, state)
        if on_epoch:
            on_epoch(snap)

    decision = None
    if early_stop is None:
        for _ in track_epochs(state, train, spec, data.train, data.val, on_epoch=record):
            pass
    else:
        decision = early_stop_run(state, train, spec, data.train, data.val, early_stop, on_epoch=record)
        if state.epoch % config.checkpoint_every:
            save_checkpoint(run_dir, state)
        row = DerivedRow(decision.criterion, decision.epoch, decision.stopped_at, decision.fired,
                         decision.architecture.genotype(), state.history[decision.epoch - 1].val_acc)
        _write_genotype(run_dir, decision, row, suffix="_online")
    logger.info("run %s finished at epoch %d", run_dir, state.epoch)
    return RunResult(run_dir, train, spec, state, decision)


def run_search(
    config: RunConfig,
    *,
    seed: Optional[int] = None,
    run_dir: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochState], None]] = None,
    early_stop: Optional[StopCriterion] = None,
) -> RunResult:
    """
    Full search from scratch; ``seed`` overrides preset and file. With
    ``early_stop`` training ends once that criterion fires and the online
    choice is written to genotype_<criterion>_online.json.
    """
    train = config.resolve_train(seed)
    spec = config.resolve_spec(train)
    run_dir = Path(run_dir) if run_dir is not None else resolve_run_dir(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(train.seed)
    state = new_state(train, spec, init_weights(spec, rng), init_alpha(spec), rng)
    write_manifest(run_dir, config, train, spec)
    _init_csvs(run_dir, spec.op_set.names)
    save_checkpoint(run_dir, state)

    logger.info("search %s: preset=%s seed=%d T=%d N=%d M=%d",
                run_dir, train.scheme_name, train.seed, train.total_epochs, spec.N, spec.op_set.M)
    return _train_loop(run_dir, config, train, spec, state, on_epoch, early_stop)


def resume_search(run_dir: Path, *, on_epoch: Optional[Callable[[EpochState], None]] = None) -> RunResult:
    """Continue from the newest checkpoint; CSV rows past it are dropped and rewritten"""
    run_dir = Path(run_dir)
    config, train, spec = read_manifest(run_dir)
    t = latest_epoch(run_dir)
    state = load_checkpoint(run_dir, t)
    for name in (METRICS_CSV, MAGNITUDES_CSV, ALPHAS_CSV):
        _truncate(run_dir / name, t)
    logger.info("resuming %s from epoch %d of %d", run_dir, t, train.total_epochs)
    return _train_loop(run_dir, config, train, spec, state, on_epoch)


# -- multi-seed batches ------------------------------------------------------------------

def _search_worker(config_json: str, seed: int, run_dir: str) -> str:
    run_search(RunConfig.model_validate_json(config_json), seed=seed, run_dir=Path(run_dir))
    return run_dir


async def _run_parallel(config: RunConfig, seeds: Sequence[int], base: Path, workers: int) -> List[str]:
    loop = asyncio.get_running_loop()
    payload = config.model_dump_json()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        jobs = [loop.run_in_executor(pool, _search_worker, payload, s, str(base / f"seed_{s}")) for s in seeds]
        return await asyncio.gather(*jobs)


def run_seeds(config: RunConfig, seeds: Sequence[int], *, workers: int = 1,
              base_dir: Optional[Path] = None) -> List[Path]:
    """One independent run per seed, each in <base>/seed_<s>/"""
    base = Path(base_dir) if base_dir is not None else resolve_run_dir(config.output_dir)
    base.mkdir(parents=True, exist_ok=True)
    if workers <= 1:
        return [run_search(config, seed=s, run_dir=base / f"seed_{s}").run_dir for s in seeds]
    return [Path(p) for p in asyncio.run(_run_parallel(config, seeds, base, workers))]


# -- derivation ---------------------------------------------------------------------

class DerivedRow(NamedTuple):
    criterion: str
    epoch: int
    stopped_at: int
    fired: bool
    genotype: str
    val_acc: float


def default_criteria(train: TrainConfig) -> List[StopCriterion]:
    kind = "residual" if train.scheme_name in RESIDUAL_DEFAULT_PRESETS else "peak"
    return [StopCriterion.parse(f"{kind}:op_large")]


def derive(run_dir: Path, criteria: Optional[Sequence[StopCriterion]] = None) -> List[DerivedRow]:
    """
    Selective stop over a finished run, from disk only. Writes
    genotype_<criterion>.json per criterion plus summary.json; an empty
    criteria list writes nothing.
    """
    run_dir = Path(run_dir)
    _, train, spec = read_manifest(run_dir)
    if criteria is None:
        criteria = default_criteria(train)
    if not criteria:
        return []

    trace = read_trace(run_dir)
    trace.check_normalized()
    alphas = read_alphas(run_dir, spec)
    metrics = {m.epoch: m for m in read_metrics(run_dir)}
    decisions = selective_stop(trace, alphas, lambda t: load_alpha(run_dir, t), criteria, spec)

    rows = []
    for label, d in decisions.items():
        row = DerivedRow(label, d.epoch, d.stopped_at, d.fired, d.architecture.genotype(),
                         metrics[d.epoch].val_acc if d.epoch in metrics else float("nan"))
        _write_genotype(run_dir, d, row)
        rows.append(row)
    (run_dir / SUMMARY).write_text(json.dumps([r._asdict() for r in rows], indent=2))
    return rows


def _write_genotype(run_dir: Path, decision: StopDecision, row: DerivedRow, suffix: str = "") -> None:
    doc = {**row._asdict(), "edges": decision.architecture.to_json()}
    (run_dir / f"genotype_{decision.criterion}{suffix}.json").write_text(json.dumps(doc, indent=2))


class BatchSummary(NamedTuple):
    criterion: str
    runs: int
    epoch_mean: float
    epoch_std: float
    val_acc_mean: float
    val_acc_std: float


def derive_batch(base_dir: Path, criteria: Optional[Sequence[StopCriterion]] = None) -> List[BatchSummary]:
    """Derive every seed_<s>/ run under ``base_dir`` and aggregate mean +- std per criterion"""
    base_dir = Path(base_dir)
    runs = sorted((p for p in base_dir.glob("seed_*") if p.is_dir() and p.name.split("_", 1)[1].isdigit()),
                  key=lambda p: int(p.name.split("_", 1)[1]))
    if not runs:
        raise IntegrityError(f"no seed_<s> runs under {base_dir}")
    per_criterion: Dict[str, List[DerivedRow]] = {}
    for run in runs:
        for row in derive(run, criteria):
            per_criterion.setdefault(row.criterion, []).append(row)

    summary = []
    for label, rows in per_criterion.items():
        epochs = np.array([r.epoch for r in rows], dtype=np.float64)
        accs = np.array([r.val_acc for r in rows], dtype=np.float64)
        summary.append(BatchSummary(label, len(rows), float(epochs.mean()), float(epochs.std()),
                                    float(accs.mean()), float(accs.std())))
    if summary:
        (base_dir / SUMMARY).write_text(json.dumps([s._asdict() for s in summary], indent=2))
    return summary


class PeakRow(NamedTuple):
    op: str
    peak_epoch: int
    peak_value: float
    final_value: float


def magnitude_peaks(run_dir: Path) -> List[PeakRow]:
    trace = read_trace(run_dir)
    return [
        PeakRow(op, int(np.argmax(trace.values[:, i])) + 1, float(trace.values[:, i].max()), float(trace.values[-1, i]))
        for i, op in enumerate(trace.op_names)
    ]


# -- gradient check --------------------------------------------------------------------

GRADCHECK_TOL = 1e-5
GRADCHECK_EPS = 1e-5
# below this magnitude the error is absolute: tol * floor = 1e-8
GRADCHECK_FLOOR = 1e-3
RELU_MARGIN = 1e-4
MAX_REDRAWS = 100


class GradcheckReport(NamedTuple):
    trials: int
    max_error: float
    failures: List[Tuple[int, str, float]]
    floor: float = GRADCHECK_FLOOR

    @property
    def passed(self) -> bool:
        return not self.failures


def _random_case(rng: np.random.Generator):
    """A tiny random supernet whose ReLUs all sit clear of their kink"""
    for _ in range(MAX_REDRAWS):
        spec = SupernetSpec(
            nodes_per_cell=int(rng.integers(2, 5)),
            cells=int(rng.integers(1, 3)),
            feature_dim=int(rng.integers(2, 4)),
            input_dim=int(rng.integers(2, 4)),
            classes=int(rng.integers(2, 4)),
        )
        weights = init_weights(spec, rng)
        alpha = rng.normal(size=(spec.N, spec.op_set.M))
        features = rng.normal(size=(3, spec.input_dim))
        labels = rng.integers(0, spec.classes, size=3)
        result = loss_and_grads(spec, weights, alpha, features, labels, wrt_weights=True, wrt_alpha=True)
        if result.relu_margin >= RELU_MARGIN:
            return spec, weights, alpha, features, labels, result
    raise DomainError(f"no kink-free gradient-check case in {MAX_REDRAWS} draws")


def run_gradcheck(trials: int, seed: int = 0, tol: float = GRADCHECK_TOL) -> GradcheckReport:
    """Compare every analytic weight and alpha gradient with central differences"""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for trial in range(trials):
        spec, weights, alpha, features, labels, result = _random_case(rng)

        def loss_with(name: str):
            def f(value: np.ndarray) -> float:
                w = dict(weights)
                a = alpha
                if name == "alpha":
                    a = value
                else:
                    w[name] = value
                return loss_and_grads(spec, w, a, features, labels).loss
            return f

        checks = {name: (result.weight_grads[name], weights[name]) for name in weights}
        checks["alpha"] = (result.alpha_grad, alpha)
        for name, (analytic, value) in checks.items():
            err = relative_error(analytic, finite_diff_grad(loss_with(name), value, GRADCHECK_EPS),
                                 GRADCHECK_FLOOR)
            worst = max(worst, err)
            if err > tol:
                failures.append((trial, name, err))
                logger.error("trial %d: %s relative error %.3e > %.0e", trial, name, err, tol)
        logger.debug("trial %d: N=%d cells=%d d=%d ok", trial, spec.N, spec.cells, spec.feature_dim)
    return GradcheckReport(trials, worst, failures)


# -- dynamics output -------------------------------------------------------------------

def write_trajectory_csv(path: Path, trajectory: Trajectory) -> None:
    d = trajectory.x.shape[1]
    header = ["step", *(f"x_{i + 1}" for i in range(d)), *(f"y_{i + 1}" for i in range(d))]
    rows = [[str(t), *(fmt(v) for v in x), *(fmt(v) for v in y)]
            for t, (x, y) in enumerate(zip(trajectory.x, trajectory.y))]
    _write_rows(Path(path), [header, *rows], "w")


def write_sweep_report(path: Path, report: SweepReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))
