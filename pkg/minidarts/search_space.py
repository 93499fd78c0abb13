#!/usr/bin/env python3
"""
Cell Search Space
=================

A desk-scale analogue of the NAS-BENCH-201 cell: nodes 0..n-1 where node 0 is
the cell input, one compound edge per pair i < j, and the last node as the
cell output. Every compound edge carries all M candidate operations and mixes
their outputs with softmax(alpha_edge).

Candidate analogues (benchmark name in brackets):
    none          zero output                       [none]
    skip_connect  identity                          [skip_connect]
    op_small      affine + ReLU                     [nor_conv_1x1]
    op_large      two affine + ReLU layers          [nor_conv_3x3]
    avg_smooth    fixed 3-wide window mean          [avg_pool_3x3]
"""

import logging
from typing import Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .autodiff import Tape, Tensor, backward, softmax
from .errors import DivergenceError, DomainError

logger = logging.getLogger(__name__)

OpKind = Literal["zero", "identity", "affine_relu", "affine_relu_2", "window_mean"]

LEARNABLE_KINDS = frozenset({"affine_relu", "affine_relu_2"})
SMOOTH_WIDTH = 3


class OpSpec(BaseModel):
    """One candidate operation"""
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Unique operation name")
    kind: OpKind = Field(..., description="How the operation transforms its input")

    @property
    def learnable(self) -> bool:
        return self.kind in LEARNABLE_KINDS

    def param_shapes(self, feature_dim: int) -> Dict[str, Tuple[int, ...]]:
        d = feature_dim
        if self.kind == "affine_relu":
            return {"W": (d, d), "b": (d,)}
        if self.kind == "affine_relu_2":
            return {"W1": (d, d), "b1": (d,), "W2": (d, d), "b2": (d,)}
        return {}


class OperationSet(BaseModel):
    """Ordered candidate set O; M = len(ops)"""
    model_config = ConfigDict(frozen=True)

    ops: Tuple[OpSpec, ...] = Field(..., min_length=1)

    @field_validator("ops")
    @classmethod
    def _unique_names(cls, ops):
        names = [op.name for op in ops]
        if len(set(names)) != len(names):
            raise ValueError(f"operation names must be unique: {names}")
        return ops

    @property
    def M(self) -> int:
        return len(self.ops)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(op.name for op in self.ops)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DomainError(f"unknown operation {name!r}; known: {list(self.names)}") from None


DEFAULT_OPS = OperationSet(ops=(
    OpSpec(name="none", kind="zero"),
    OpSpec(name="skip_connect", kind="identity"),
    OpSpec(name="op_small", kind="affine_relu"),
    OpSpec(name="op_large", kind="affine_relu_2"),
    OpSpec(name="avg_smooth", kind="window_mean"),
))


class SupernetSpec(BaseModel):
    """Shape of the supernet: stem -> stacked cells -> classifier"""
    model_config = ConfigDict(frozen=True)

    nodes_per_cell: int = Field(default=4, ge=2, description="Nodes per cell, node 0 is the input")
    cells: int = Field(default=1, ge=1, description="Stacked cells sharing one set of alphas")
    feature_dim: int = Field(default=16, ge=1, description="Width of every cell feature")
    input_dim: int = Field(default=16, ge=1, description="Width of the raw inputs")
    classes: int = Field(default=4, ge=2, description="Number of output classes")
    op_set: OperationSet = Field(default=DEFAULT_OPS)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        """Compound edges (i, j), ordered by target node then source node"""
        return [(i, j) for j in range(1, self.nodes_per_cell) for i in range(j)]

    @property
    def N(self) -> int:
        return self.nodes_per_cell * (self.nodes_per_cell - 1) // 2


class Architecture(NamedTuple):
    """Discretised cell: one operation per compound edge"""
    indices: Tuple[int, ...]
    ops: Tuple[str, ...]
    edges: Tuple[Tuple[int, int], ...]

    def genotype(self) -> str:
        """Benchmark-style string, e.g. |op_large~0|+|none~0|skip_connect~1|"""
        by_target: Dict[int, List[str]] = {}
        for (i, j), op in zip(self.edges, self.ops):
            by_target.setdefault(j, []).append(f"{op}~{i}")
        return "+".join("|" + "|".join(parts) + "|" for _, parts in sorted(by_target.items()))

    def to_json(self) -> List[dict]:
        return [{"edge": [i, j], "op": op} for (i, j), op in zip(self.edges, self.ops)]

    def count(self, op_name: str) -> int:
        return sum(op == op_name for op in self.ops)


# -- construction -------------------------------------------------------------

def remove_operation(op_set: OperationSet, name: str) -> OperationSet:
    """Drop one candidate, keeping the order of the rest"""
    op_set.index(name)
    if op_set.M < 2:
        raise DomainError("cannot remove the last remaining operation")
    return OperationSet(ops=tuple(op for op in op_set.ops if op.name != name))


def weight_shapes(spec: SupernetSpec) -> Dict[str, Tuple[int, ...]]:
    """Every supernet weight, in a fixed order"""
    shapes = {"stem.W": (spec.input_dim, spec.feature_dim), "stem.b": (spec.feature_dim,)}
    for cell in range(spec.cells):
        for i, j in spec.edges:
            for op in spec.op_set.ops:
                for pname, shape in op.param_shapes(spec.feature_dim).items():
                    shapes[f"cell{cell}.edge{i}_{j}.{op.name}.{pname}"] = shape
    shapes["classifier.W"] = (spec.feature_dim, spec.classes)
    shapes["classifier.b"] = (spec.classes,)
    return shapes


def _fan_in(name: str, shapes: Mapping[str, Tuple[int, ...]]) -> int:
    prefix, pname = name.rsplit(".", 1)
    matrix = pname.replace("b", "W")
    return shapes[f"{prefix}.{matrix}"][0]


def init_weights(spec: SupernetSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every matrix and bias"""
    shapes = weight_shapes(spec)
    weights = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(_fan_in(name, shapes))
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


def init_alpha(spec: SupernetSpec) -> np.ndarray:
    """All-zero architecture parameters: softmax starts uniform"""
    return np.zeros((spec.N, spec.op_set.M))


# -- forward ------------------------------------------------------------------

def apply_op(tape: Tape, op: OpSpec, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    if op.kind == "zero":
        return tape.scale(x, 0.0)
    if op.kind == "identity":
        return x
    if op.kind == "window_mean":
        return tape.window_mean(x, SMOOTH_WIDTH)
    if op.kind == "affine_relu":
        return tape.relu(tape.add_bias(tape.matmul(x, params["W"]), params["b"]))
    hidden = tape.relu(tape.add_bias(tape.matmul(x, params["W1"]), params["b1"]))
    return tape.relu(tape.add_bias(tape.matmul(hidden, params["W2"]), params["b2"]))


def mixed_edge_forward(
    tape: Tape,
    x: Tensor,
    edge_weights: Mapping[str, Mapping[str, Tensor]],
    alpha_edge: Tensor,
    op_set: OperationSet,
) -> Tensor:
    """sum_m softmax(alpha_edge)_m * o^m(x)"""
    if alpha_edge.shape != (op_set.M,):
        raise DomainError(f"alpha_edge has shape {alpha_edge.shape}, expected ({op_set.M},)")
    mixture = tape.softmax(alpha_edge)
    outputs = [apply_op(tape, op, x, edge_weights.get(op.name, {})) for op in op_set.ops]
    return tape.mix(mixture, outputs)


def _edge_params(weights: Mapping[str, Tensor], cell: int, edge: Tuple[int, int],
                 op_set: OperationSet) -> Dict[str, Dict[str, Tensor]]:
    prefix = f"cell{cell}.edge{edge[0]}_{edge[1]}"
    params: Dict[str, Dict[str, Tensor]] = {}
    for name, tensor in weights.items():
        if name.startswith(prefix + "."):
            op_name, pname = name[len(prefix) + 1:].rsplit(".", 1)
            params.setdefault(op_name, {})[pname] = tensor
    return params


def supernet_forward(
    spec: SupernetSpec,
    weights: Mapping[str, Tensor],
    alpha: Sequence[Tensor],
    features: np.ndarray,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Logits of shape (batch, classes) for a batch of shape (batch, input_dim)"""
    tape = tape if tape is not None else Tape()
    expected = weight_shapes(spec)
    if set(weights) != set(expected) or any(weights[k].shape != s for k, s in expected.items()):
        raise DomainError("supernet weights do not match the supernet shape")
    if len(alpha) != spec.N:
        raise DomainError(f"expected {spec.N} alpha vectors, got {len(alpha)}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise DomainError(f"batch shape {features.shape} does not match input_dim {spec.input_dim}")

    x = tape.add_bias(tape.matmul(Tensor(features), weights["stem.W"]), weights["stem.b"])
    for cell in range(spec.cells):
        nodes = [x]
        for j in range(1, spec.nodes_per_cell):
            node = None
            for i in range(j):
                edge_id = spec.edges.index((i, j))
                params = _edge_params(weights, cell, (i, j), spec.op_set)
                out = mixed_edge_forward(tape, nodes[i], params, alpha[edge_id], spec.op_set)
                node = out if node is None else tape.add(node, out)
            nodes.append(node)
        x = nodes[-1]
    return tape.add_bias(tape.matmul(x, weights["classifier.W"]), weights["classifier.b"])


class LossAndGrads(NamedTuple):
    loss: float
    accuracy: float
    weight_grads: Optional[Dict[str, np.ndarray]]
    alpha_grad: Optional[np.ndarray]
    relu_margin: float


def loss_and_grads(
    spec: SupernetSpec,
    weights: Mapping[str, np.ndarray],
    alpha: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    *,
    wrt_weights: bool = False,
    wrt_alpha: bool = False,
) -> LossAndGrads:
    """Mean cross-entropy on one batch and, on request, its gradients"""
    tape = Tape()
    w_tensors = {k: Tensor(v, requires_grad=wrt_weights, name=k) for k, v in weights.items()}
    a_tensors = [Tensor(row, requires_grad=wrt_alpha, name=f"alpha{n}") for n, row in enumerate(alpha)]
    logits = supernet_forward(spec, w_tensors, a_tensors, features, tape)
    if not np.all(np.isfinite(logits.data)):
        raise DivergenceError("non-finite logits")
    loss = tape.cross_entropy(logits, labels)
    accuracy = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))

    weight_grads = alpha_grad = None
    if wrt_weights or wrt_alpha:
        backward(tape, loss)
    if wrt_weights:
        weight_grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in w_tensors.items()}
    if wrt_alpha:
        alpha_grad = np.stack([t.grad if t.grad is not None else np.zeros_like(t.data) for t in a_tensors])
    return LossAndGrads(float(loss.data), accuracy, weight_grads, alpha_grad, tape.min_relu_margin())


# -- discretisation -----------------------------------------------------------

def mixture_weights(alpha: np.ndarray) -> np.ndarray:
    """softmax of every edge's alpha vector, shape (N, M)"""
    return softmax(np.asarray(alpha, dtype=np.float64))


def discretize(alpha: np.ndarray, spec: SupernetSpec) -> Architecture:
    """Per-edge argmax over alpha; ties go to the lowest index"""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (spec.N, spec.op_set.M):
        raise DomainError(f"alpha shape {alpha.shape} does not match ({spec.N}, {spec.op_set.M})")
    indices = tuple(int(i) for i in np.argmax(alpha, axis=1))
    return Architecture(
        indices=indices,
        ops=tuple(spec.op_set.names[i] for i in indices),
        edges=tuple(spec.edges),
    )
