#!/usr/bin/env python3
"""
Reverse-Mode Autodiff
=====================

A define-by-run tape over dense float64 numpy arrays. Every primitive appends
one node to the tape during the forward pass; ``backward`` walks the tape in
reverse and applies the matching rule from ``BACKWARD``.

The whole system: 1 Tensor + 1 Tape + a table of backward rules.

Usage:
    tape = Tape()
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    loss = tape.sum(tape.relu(tape.matmul(x, w)))
    backward(tape, loss)
    w.grad  # d loss / d w
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, StateError


class Tensor:
    """Dense value with an optional gradient slot"""

    __slots__ = ("data", "grad", "requires_grad", "name", "node", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Node(NamedTuple):
    """One recorded primitive: inputs always precede the node on the tape"""
    op: str
    inputs: Tuple[int, ...]
    saved: dict


class Tape:
    """Computation tape, rebuilt for every forward pass"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.needs_grad: List[bool] = []
        self.leaves: Dict[int, Tensor] = {}

    # -- bookkeeping ---------------------------------------------------------

    def _bind(self, tensor: Tensor) -> int:
        if tensor._tape is self and tensor.node is not None:
            return tensor.node
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), {}))
        self.values.append(tensor.data)
        self.needs_grad.append(tensor.requires_grad)
        self.leaves[node_id] = tensor
        tensor._tape, tensor.node = self, node_id
        return node_id

    def _record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, **saved) -> Tensor:
        input_ids = tuple(self._bind(t) for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(Node(op, input_ids, saved))
        self.values.append(out)
        self.needs_grad.append(any(self.needs_grad[i] for i in input_ids))
        result = Tensor.__new__(Tensor)
        result.data, result.grad, result.name = out, None, ""
        result.requires_grad = False
        result._tape, result.node = self, node_id
        return result

    def min_relu_margin(self) -> float:
        """Smallest |pre-activation| seen by any ReLU on this tape (inf if none)"""
        margins = [np.min(np.abs(self.values[n.inputs[0]])) for n in self.nodes if n.op == "relu"]
        return float(min(margins)) if margins else float("inf")

    # -- primitives ----------------------------------------------------------

    def matmul(self, x: Tensor, w: Tensor) -> Tensor:
        if x.data.ndim not in (1, 2) or w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise DomainError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
        return self._record("matmul", (x, w), x.data @ w.data)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DomainError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return self._record("add", (a, b), a.data + b.data)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        """Row-wise bias: x (..., D) + b (D,). The only broadcast on the tape."""
        if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise DomainError(f"bias shape mismatch: {x.shape} + {b.shape}")
        return self._record("add_bias", (x, b), x.data + b.data)

    def relu(self, x: Tensor) -> Tensor:
        return self._record("relu", (x,), np.maximum(x.data, 0.0))

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._record("scale", (x,), float(c) * x.data, c=float(c))

    def window_mean(self, x: Tensor, width: int = 3) -> Tensor:
        """Mean over a centred window along the last axis (truncated at the borders)"""
        pool = window_matrix(x.shape[-1], width)
        return self._record("window_mean", (x,), x.data @ pool.T, pool=pool)

    def softmax(self, x: Tensor) -> Tensor:
        y = softmax(x.data)
        return self._record("softmax", (x,), y, y=y)

    def mix(self, weights: Tensor, outputs: Sequence[Tensor]) -> Tensor:
        """Weighted sum  sum_m weights[m] * outputs[m]"""
        if weights.data.ndim != 1 or weights.shape[0] != len(outputs) or not outputs:
            raise DomainError(f"mix expects {weights.shape} weights for {len(outputs)} outputs")
        shape = outputs[0].shape
        if any(o.shape != shape for o in outputs):
            raise DomainError("mix outputs must share one shape")
        out = sum(w * o.data for w, o in zip(weights.data, outputs))
        return self._record("mix", (weights, *outputs), np.asarray(out, dtype=np.float64))

    def sum(self, x: Tensor) -> Tensor:
        return self._record("sum", (x,), np.asarray(x.data.sum()))

    def cross_entropy(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        """Mean cross-entropy of softmax(logits) against integer labels"""
        labels = np.asarray(labels, dtype=np.int64)
        if logits.data.ndim == 1:
            logits_2d, labels = logits.data[None, :], labels.reshape(1)
        else:
            logits_2d = logits.data
        if labels.shape != (logits_2d.shape[0],):
            raise DomainError(f"labels {labels.shape} do not match logits {logits.shape}")
        if labels.min() < 0 or labels.max() >= logits_2d.shape[1]:
            raise DomainError("label outside [0, classes)")
        probs = softmax(logits_2d)
        picked = probs[np.arange(labels.shape[0]), labels]
        loss = -np.mean(np.log(picked))
        return self._record("cross_entropy", (logits,), np.asarray(loss), probs=probs, labels=labels)


# -- backward rules: (grad_out, node, tape) -> one grad (or None) per input ----

def _matmul_backward(g, node, tape):
    x, w = (tape.values[i] for i in node.inputs)
    gw = np.outer(x, g) if x.ndim == 1 else x.T @ g
    return g @ w.T, gw


def _relu_backward(g, node, tape):
    return (g * (tape.values[node.inputs[0]] > 0.0),)


def _softmax_backward(g, node, tape):
    y = node.saved["y"]
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _mix_backward(g, node, tape):
    weights = tape.values[node.inputs[0]]
    outputs = [tape.values[i] for i in node.inputs[1:]]
    return (np.array([np.sum(g * o) for o in outputs]), *(w * g for w in weights))


def _cross_entropy_backward(g, node, tape):
    probs, labels = node.saved["probs"], node.saved["labels"]
    delta = probs.copy()
    delta[np.arange(labels.shape[0]), labels] -= 1.0
    delta *= g / labels.shape[0]
    return (delta.reshape(tape.values[node.inputs[0]].shape),)


def _add_bias_backward(g, node, tape):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


BACKWARD: Dict[str, Callable] = {
    "matmul": _matmul_backward,
    "add": lambda g, node, tape: (g, g),
    "add_bias": _add_bias_backward,
    "relu": _relu_backward,
    "scale": lambda g, node, tape: (node.saved["c"] * g,),
    "window_mean": lambda g, node, tape: (g @ node.saved["pool"],),
    "softmax": _softmax_backward,
    "mix": _mix_backward,
    "sum": lambda g, node, tape: (np.full(tape.values[node.inputs[0]].shape, float(g)),),
    "cross_entropy": _cross_entropy_backward,
}


def backward(tape: Tape, loss: Tensor) -> List[Tensor]:
    """
    Populate ``grad`` on every requires_grad leaf that the loss depends on.

    Returns the leaves that received a gradient, in tape order.
    """
    if not tape.nodes or loss._tape is not tape or loss.node is None:
        raise StateError("backward called before a forward pass was recorded on this tape")
    if loss.data.size != 1:
        raise DomainError(f"loss must be scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    updated = []
    for node_id in range(loss.node, -1, -1):
        g = grads.pop(node_id, None)
        if g is None or not tape.needs_grad[node_id]:
            continue
        node = tape.nodes[node_id]
        if node.op == "leaf":
            leaf = tape.leaves[node_id]
            leaf.grad = np.array(g, dtype=np.float64)
            updated.append(leaf)
            continue
        for input_id, input_grad in zip(node.inputs, BACKWARD[node.op](g, node, tape)):
            if input_grad is None or not tape.needs_grad[input_id]:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad
    return updated[::-1]


# -- plain numpy helpers -------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis"""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax input contains NaN or Inf")
    shifted = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


def softmax_jacobian(y: np.ndarray) -> np.ndarray:
    """dy/dx of softmax expressed in its output: diag(y) - y y^T"""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or not np.all(np.isfinite(y)):
        raise DomainError("softmax_jacobian expects a finite 1-D vector")
    if np.any(y < 0.0) or np.any(y > 1.0) or abs(y.sum() - 1.0) > 1e-9:
        raise DomainError(f"not a probability distribution (sum={y.sum()!r})")
    return np.diag(y) - np.outer(y, y)


def window_matrix(size: int, width: int) -> np.ndarray:
    """Averaging matrix P so that (x @ P.T)[i] is the mean of x over the window around i"""
    if width < 1 or width % 2 == 0:
        raise DomainError(f"window width must be a positive odd integer, got {width}")
    half = width // 2
    pool = np.zeros((size, size))
    for i in range(size):
        lo, hi = max(0, i - half), min(size, i + half + 1)
        pool[i, lo:hi] = 1.0 / (hi - lo)
    return pool


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), per coordinate"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        upper = f(x)
        flat[i] = orig - eps
        lower = f(x)
        flat[i] = orig
        gflat[i] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)

    Entries with both magnitudes below ``floor`` are compared absolutely:
    with the default floor and a 1e-5 tolerance that is a 1e-8 bound on
    |a - n|.
    """
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
