#!/usr/bin/env python3
"""
minidarts CLI
=============

    minidarts search     --config run.json [--preset ex_darts] [--seed 3]
    minidarts derive     --run runs/baseline --criteria peak:op_large,sc:2
    minidarts dynamics   --lr 0.001,0.01 [--sweep-conventions]
    minidarts gradcheck  --trials 100
    minidarts magnitudes --run runs/baseline
    minidarts presets

Exit codes: 0 ok, 2 configuration, 3 divergence, 4 missing/corrupt run
files, 5 gradient check failed.
"""

import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import typer
from dotenv import load_dotenv
from pydantic import ValidationError
from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from typing_extensions import Annotated

from .bilevel_trainer import PRESETS
from .errors import (ConfigError, ConventionNotFoundError, DivergenceError, DomainError,
                     IntegrityError)
from .harness import (derive, derive_batch, magnitude_peaks, resume_search, run_gradcheck,
                      read_manifest, run_search, run_seeds, write_sweep_report, write_trajectory_csv, MANIFEST)
from .magnitude_stop import StopCriterion, magnitude, parse_criteria
from .run_schema import RunConfig
from .search_space import discretize
from .softmax_dynamics import (REFERENCE_TARGETS, DynamicsConfig, convention_sweep, restoration_epoch,
                               run_two_phase)
from .tracking import EpochState, format_progress

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_INTEGRITY = 4
EXIT_GRADCHECK = 5

app = typer.Typer(
    name="minidarts",
    help="Desk-scale differentiable architecture search with magnitude-based stopping",
    add_completion=False,
    rich_markup_mode="rich",
)

console = Console()


def setup_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.environ.get("MINIDARTS_LOG", "INFO").upper()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.callback()
def main(verbose: Annotated[bool, typer.Option("--verbose", "-v", help="DEBUG logging")] = False):
    load_dotenv()
    setup_logging(verbose)


@contextmanager
def exit_codes():
    """Map engine errors onto the documented exit codes"""
    try:
        yield
    except (ValidationError, ConfigError, DomainError) as exc:
        console.print(f"[bold red]configuration error:[/bold red] {exc}")
        raise typer.Exit(EXIT_CONFIG)
    except DivergenceError as exc:
        where = f" (epoch {exc.epoch})" if exc.epoch is not None else f" (step {exc.step})" if exc.step is not None else ""
        console.print(f"[bold red]diverged{where}:[/bold red] {exc}")
        raise typer.Exit(EXIT_DIVERGENCE)
    except IntegrityError as exc:
        console.print(f"[bold red]run files:[/bold red] {exc}")
        raise typer.Exit(EXIT_INTEGRITY)


def _split(text: str, cast, name: str) -> list:
    try:
        return [cast(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise typer.BadParameter(f"cannot parse {text!r}", param_hint=name) from None


def _load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.model_validate_json(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None


# -- search -----------------------------------------------------------------------

@app.command()
def search(
    config: Annotated[Optional[Path], typer.Option("--config", "-c", help="RunConfig JSON file")] = None,
    preset: Annotated[Optional[str], typer.Option(help="Preset name, overrides the file's preset")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Training seed, overrides preset and file")] = None,
    seeds: Annotated[Optional[str], typer.Option(help="Comma-separated seeds; one run per seed")] = None,
    workers: Annotated[int, typer.Option(help="Worker processes for --seeds")] = 1,
    out: Annotated[Optional[Path], typer.Option(help="Run directory, overrides output_dir")] = None,
    resume: Annotated[Optional[Path], typer.Option(help="Continue this run from its newest checkpoint")] = None,
    early_stop: Annotated[Optional[str], typer.Option(help="Stop online when this criterion fires, e.g. peak:op_large:5")] = None,
    quiet: Annotated[bool, typer.Option(help="No per-epoch progress lines")] = False,
):
    """Run a search and write metrics, magnitudes, checkpoints and a manifest"""
    with exit_codes():
        if resume is not None:
            names = read_manifest(resume).spec.op_set.names
            result = resume_search(resume, on_epoch=None if quiet else _progress_printer(names))
            _report_run(result.run_dir, result.state.alpha, result.spec)
            return

        run_config = _load_config(config)
        updates = {}
        if preset is not None:
            updates["preset"] = preset
        if out is not None:
            updates["output_dir"] = str(out)
        run_config = run_config.model_copy(update=updates)
        train = run_config.resolve_train(seed)
        _print_resolved(train)

        if seeds:
            seed_list = _split(seeds, int, "--seeds")
            for run_dir in run_seeds(run_config, seed_list, workers=workers):
                console.print(f"[green]finished[/green] {run_dir}")
            return

        criterion = StopCriterion.parse(early_stop) if early_stop else None
        names = run_config.resolve_spec(train).op_set.names
        result = run_search(run_config, seed=seed, on_epoch=None if quiet else _progress_printer(names),
                            early_stop=criterion)
        if result.decision is not None:
            d = result.decision
            status = "fired" if d.fired else "never fired"
            console.print(f"{d.criterion} {status}: epoch {d.epoch} -> {d.architecture.genotype()}")
        _report_run(result.run_dir, result.state.alpha, result.spec)


def _progress_printer(op_names):
    def show(snap: EpochState) -> None:
        console.print(format_progress(snap, op_names, magnitude(snap.alpha)))
    return show


def _print_resolved(train) -> None:
    table = Table(title=f"preset {train.scheme_name}", box=box.SIMPLE)
    for column in ("lr_w", "lr_alpha", "wd_w", "wd_alpha", "T", "warmup", "seed"):
        table.add_column(column)
    table.add_row(
        f"{train.weight_lr_schedule.kind}({train.weight_lr_schedule.lr:g})",
        f"{train.param_lr_schedule.kind}({train.param_lr_schedule.lr:g})",
        f"{train.weight_decay:g}", f"{train.param_weight_decay:g}",
        str(train.total_epochs), str(train.warmup_epochs), str(train.seed),
    )
    console.print(table)


def _report_run(run_dir: Path, alpha, spec) -> None:
    console.print(f"final cell: {discretize(alpha, spec).genotype()}")
    console.print(f"[green]run written to[/green] {run_dir}")


# -- derive ---------------------------------------------------------------------------

@app.command("derive")
def derive_cmd(
    run: Annotated[Path, typer.Option(help="Run directory (or a --seeds batch directory)")],
    criteria: Annotated[Optional[str], typer.Option(help="e.g. peak:op_large,residual:op_large,sc:2,rt:10")] = None,
):
    """Selective stop: roll each criterion back to its epoch and write genotypes"""
    with exit_codes():
        parsed = parse_criteria(criteria) if criteria is not None else None
        if not (run / MANIFEST).exists() and any(run.glob("seed_*")):
            rows = derive_batch(run, parsed)
            table = Table(title=f"batch {run}", box=box.SIMPLE)
            for column in ("criterion", "runs", "epoch", "val_acc"):
                table.add_column(column)
            for s in rows:
                table.add_row(s.criterion, str(s.runs), f"{s.epoch_mean:.1f} ± {s.epoch_std:.1f}",
                              f"{s.val_acc_mean:.3f} ± {s.val_acc_std:.3f}")
            console.print(table)
            return

        rows = derive(run, parsed)
        if not rows:
            console.print("no criteria given; nothing derived")
            return
        table = Table(title=f"selective stop {run}", box=box.SIMPLE)
        for column in ("criterion", "epoch", "fired", "val_acc", "genotype"):
            table.add_column(column)
        for r in rows:
            table.add_row(r.criterion, str(r.epoch), "yes" if r.fired else "no (end)", f"{r.val_acc:.3f}", r.genotype)
        console.print(table)


# -- dynamics -----------------------------------------------------------------------

@app.command()
def dynamics(
    lr: Annotated[str, typer.Option(help="Comma-separated learning rates; empty uses 0.001,0.01")] = "",
    sweep_conventions: Annotated[bool, typer.Option("--sweep-conventions", help="Search the update conventions")] = False,
    t1: Annotated[int, typer.Option(help="Phase-one length")] = 25,
    momentum: Annotated[float, typer.Option(help="Momentum coefficient")] = 0.9,
    max_steps: Annotated[int, typer.Option(help="Phase-two step budget")] = 500,
    dump: Annotated[Optional[Path], typer.Option(help="Write the trajectory CSV here")] = None,
    report: Annotated[Optional[Path], typer.Option(help="Write the convention sweep report JSON here")] = None,
):
    """Two-phase softmax restoration time per learning rate"""
    with exit_codes():
        lrs: List[float] = _split(lr, float, "--lr") or [lr_ for lr_, _ in REFERENCE_TARGETS]
        base = DynamicsConfig(t1=t1, momentum=momentum, max_steps=max_steps)

        table = Table(title="restoration", box=box.SIMPLE)
        table.add_column("lr")
        table.add_column("t2")
        for value in lrs:
            cfg = base.model_copy(update={"lr": value})
            trajectory = run_two_phase(cfg)
            table.add_row(f"{value:g}", str(restoration_epoch(trajectory, cfg.restoration_rule)))
            if dump is not None:
                path = dump if len(lrs) == 1 else dump.with_name(f"{dump.stem}_lr{value:g}{dump.suffix}")
                write_trajectory_csv(path, trajectory)
        console.print(table)

        if sweep_conventions:
            try:
                sweep = convention_sweep(base=base)
            except ConventionNotFoundError as exc:
                for combo, row in exc.nearest.items():
                    console.print(f"  {'/'.join(combo)}: {row}")
                console.print(f"[bold red]{exc}[/bold red]")
                raise typer.Exit(1)
            for combo in sweep.matches:
                console.print(f"match: {'/'.join(combo)}")
            console.print(f"frozen convention: {'/'.join(sweep.frozen)}")
            if report is not None:
                write_sweep_report(report, sweep)


# -- gradcheck --------------------------------------------------------------------------

@app.command()
def gradcheck(
    trials: Annotated[int, typer.Option(min=0, help="Random supernet configurations to check")] = 100,
    seed: Annotated[int, typer.Option(help="Seed of the random configurations")] = 0,
):
    """Finite-difference check of every weight and alpha gradient"""
    with exit_codes():
        result = run_gradcheck(trials, seed=seed)
    console.print(f"{result.trials} trial(s), max relative error {result.max_error:.3e} (floor {result.floor:g})")
    if not result.passed:
        for trial, name, err in result.failures:
            console.print(f"[red]FAIL[/red] trial {trial} tensor {name}: {err:.3e}")
        raise typer.Exit(EXIT_GRADCHECK)


# -- inspection -----------------------------------------------------------------------------

@app.command()
def magnitudes(run: Annotated[Path, typer.Option(help="Run directory")]):
    """Per-operation magnitude peaks of a run"""
    with exit_codes():
        rows = magnitude_peaks(run)
    table = Table(title=f"magnitude peaks {run}", box=box.SIMPLE)
    for column in ("op", "peak epoch", "peak", "final"):
        table.add_column(column)
    for r in rows:
        table.add_row(r.op, str(r.peak_epoch), f"{r.peak_value:.4f}", f"{r.final_value:.4f}")
    console.print(table)


@app.command()
def presets():
    """List the named training presets"""
    table = Table(title="presets", box=box.SIMPLE)
    for column in ("name", "T", "warmup", "lr_w", "lr_alpha", "wd_alpha", "removed"):
        table.add_column(column)
    for name, cfg in PRESETS.items():
        table.add_row(
            name, str(cfg.total_epochs), str(cfg.warmup_epochs),
            f"{cfg.weight_lr_schedule.kind}({cfg.weight_lr_schedule.lr:g})",
            f"{cfg.param_lr_schedule.kind}({cfg.param_lr_schedule.lr:g})",
            f"{cfg.param_weight_decay:g}", ",".join(cfg.removed_ops) or "-",
        )
    console.print(table)


if __name__ == "__main__":
    app()
