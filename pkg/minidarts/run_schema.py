#!/usr/bin/env python3
"""
Run Configuration Schema
========================

The JSON document a search run is launched from. It names a preset, may
override any TrainConfig field on top of it, and describes the supernet and
the synthetic dataset. Resolving it yields the exact TrainConfig and
SupernetSpec the run uses; both are written to the run manifest.
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

from .bilevel_trainer import TrainConfig, apply_scheme
from .search_space import DEFAULT_OPS, OperationSet, SupernetSpec, remove_operation


class DatasetSpec(BaseModel):
    """Synthetic dataset request"""

    generator: Literal["gaussian_blobs", "two_spirals"] = Field(
        default="gaussian_blobs",
        description="Generator name"
    )

    n_samples: int = Field(
        default=512,
        ge=1,
        description="Total samples before the 50/50 split"
    )

    classes: int = Field(
        default=4,
        ge=2,
        description="Number of classes"
    )

    noise: float = Field(
        default=0.5,
        description="Standard deviation of the additive Gaussian noise"
    )

    seed: int = Field(
        default=0,
        description="Seed of the dataset draw (independent of the training seed)"
    )


class SupernetConfig(BaseModel):
    """Supernet shape; the class count comes from the dataset"""

    nodes_per_cell: int = Field(default=4, ge=2, description="Nodes per cell")
    cells: int = Field(default=1, ge=1, description="Stacked cells")
    feature_dim: int = Field(default=16, ge=1, description="Cell feature width")
    input_dim: int = Field(default=16, ge=1, description="Raw input width")
    ops: Optional[List[str]] = Field(
        default=None,
        description="Subset of the default candidate names, in default order; None keeps all"
    )

    @field_validator("ops")
    @classmethod
    def _known_ops(cls, ops):
        if ops is not None:
            unknown = sorted(set(ops) - set(DEFAULT_OPS.names))
            if unknown:
                raise ValueError(f"unknown operations {unknown}; known: {list(DEFAULT_OPS.names)}")
            if not ops:
                raise ValueError("ops must name at least one operation")
        return ops

    def op_set(self, removed_ops=()) -> OperationSet:
        op_set = DEFAULT_OPS
        if self.ops is not None:
            op_set = OperationSet(ops=tuple(op for op in DEFAULT_OPS.ops if op.name in self.ops))
        for name in removed_ops:
            if name in op_set.names:
                op_set = remove_operation(op_set, name)
        return op_set


class RunConfig(BaseModel):
    """One search run: preset + overrides + supernet + dataset + output"""

    preset: Optional[str] = Field(
        default="baseline",
        description="Named TrainConfig to start from"
    )

    train: Dict[str, Any] = Field(
        default_factory=dict,
        description="TrainConfig fields overriding the preset"
    )

    supernet: SupernetConfig = Field(default_factory=SupernetConfig)

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)

    output_dir: str = Field(
        default="runs/default",
        description="Run directory; relative paths resolve under MINIDARTS_OUT when set"
    )

    checkpoint_every: int = Field(
        default=1,
        ge=1,
        description="Checkpoint period in epochs (the magnitude trace is always per-epoch)"
    )

    @field_validator("train")
    @classmethod
    def _known_train_fields(cls, train):
        unknown = sorted(set(train) - set(TrainConfig.model_fields))
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {unknown}")
        return train

    def resolve_train(self, seed: Optional[int] = None) -> TrainConfig:
        """Preset, then file overrides, then ``seed``"""
        base = apply_scheme(self.preset) if self.preset else TrainConfig()
        fields = base.model_dump()
        fields.update(self.train)
        if seed is not None:
            fields["seed"] = seed
        return TrainConfig.model_validate(fields)

    def resolve_spec(self, train: TrainConfig) -> SupernetSpec:
        return SupernetSpec(
            nodes_per_cell=self.supernet.nodes_per_cell,
            cells=self.supernet.cells,
            feature_dim=self.supernet.feature_dim,
            input_dim=self.supernet.input_dim,
            classes=self.dataset.classes,
            op_set=self.supernet.op_set(train.removed_ops),
        )
