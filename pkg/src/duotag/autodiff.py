"""Reverse-mode automatic differentiation over dense float64 matrices.

Define-by-run: every operation appends a node to a tape, and the backward
pass walks the tape in strict reverse creation order, so no topological
sort is needed. Only the 2-D matrix ops required by the dual-encoder
training graph are provided; scalars travel as 1x1 matrices.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Rows with a smaller Euclidean norm than this cannot be L2-normalized;
# they indicate a construction bug upstream, so we refuse rather than clamp.
EPSILON_NORM = 1e-10


def as_matrix(value) -> np.ndarray:
    """Coerce to a 2-D float64 array (scalars become 1x1)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got array of rank {arr.ndim}")
    return arr


class Node:
    """One tape entry: an operation result plus its gradient accumulator."""

    __slots__ = ("tape", "op", "value", "grad", "parents", "_backward")

    def __init__(self, tape: "Tape", op: str, value: np.ndarray,
                 parents: tuple = (), backward: Callable[[], None] | None = None):
        self.tape = tape
        self.op = op
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = parents
        self._backward = backward
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ValueError(f"item() requires a 1x1 node, got shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of one forward pass, plus its trainable leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def parameter(self, value, name: str) -> Node:
        """Register a trainable leaf under a unique name."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(self, "parameter", as_matrix(value))
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        """A non-trainable leaf (inputs, targets)."""
        return Node(self, "constant", as_matrix(value))

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) for every parameter on this tape.

        Returns a name -> gradient map; the arrays are copies and stay
        valid after the tape is discarded.
        """
        if loss.tape is not self:
            raise ValueError("loss node does not belong to this tape")
        if loss.value.shape != (1, 1):
            raise ValueError(f"loss must be a 1x1 node, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad[...] = 0.0
        loss.grad[0, 0] = 1.0
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()
        return {name: node.grad.copy() for name, node in self.params.items()}


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for node in nodes[1:]:
        if node.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    out = Node(tape, "matmul", a.value @ b.value, (a, b))

    def backward():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    out._backward = backward
    return out


def transpose(a: Node) -> Node:
    out = Node(a.tape, "transpose", a.value.T.copy(), (a,))

    def backward():
        a.grad += out.grad.T

    out._backward = backward
    return out


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Node(tape, "add", a.value + b.value, (a, b))

    def backward():
        a.grad += out.grad
        b.grad += out.grad

    out._backward = backward
    return out


def multiply(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product."""
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"multiply shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Node(tape, "multiply", a.value * b.value, (a, b))

    def backward():
        a.grad += out.grad * b.value
        b.grad += out.grad * a.value

    out._backward = backward
    return out


def sum_all(a: Node) -> Node:
    """Sum every entry into a 1x1 node."""
    out = Node(a.tape, "sum_all", a.value.sum().reshape(1, 1), (a,))

    def backward():
        a.grad += out.grad[0, 0]

    out._backward = backward
    return out


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b, with the 1-row bias broadcast over rows."""
    tape = _same_tape(x, w, b)
    if x.value.shape[1] != w.value.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.value.shape} x {w.value.shape}")
    if b.value.shape != (1, w.value.shape[1]):
        raise ValueError(f"affine bias must be 1x{w.value.shape[1]}, got {b.value.shape}")
    out = Node(tape, "affine", x.value @ w.value + b.value, (x, w, b))

    def backward():
        x.grad += out.grad @ w.value.T
        w.grad += x.value.T @ out.grad
        b.grad += out.grad.sum(axis=0, keepdims=True)

    out._backward = backward
    return out


def tanh_act(x: Node) -> Node:
    y = np.tanh(x.value)
    out = Node(x.tape, "tanh", y, (x,))

    def backward():
        x.grad += out.grad * (1.0 - y * y)

    out._backward = backward
    return out


def row_l2_normalize(a: Node) -> Node:
    """Rescale every row to unit Euclidean norm.

    Backward applies the per-row normalization Jacobian (I - u u^T) / ||v||.
    """
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms < EPSILON_NORM):
        row = int(np.argmin(norms))
        raise ValueError(f"cannot normalize row {row}: norm {norms[row, 0]:.3e} < {EPSILON_NORM}")
    u = a.value / norms
    out = Node(a.tape, "row_l2_normalize", u, (a,))

    def backward():
        g = out.grad
        a.grad += (g - (g * u).sum(axis=1, keepdims=True) * u) / norms

    out._backward = backward
    return out


def gather_rows(table: Node, indices: Sequence[int]) -> Node:
    """Select rows by index; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("indices must be a non-empty 1-D sequence")
    if np.any(idx < 0) or np.any(idx >= table.value.shape[0]):
        raise IndexError(f"row index out of range for table with {table.value.shape[0]} rows")
    out = Node(table.tape, "gather_rows", table.value[idx].copy(), (table,))

    def backward():
        np.add.at(table.grad, idx, out.grad)

    out._backward = backward
    return out


def mean_pool_rows(x: Node, segment_lengths: Sequence[int]) -> Node:
    """Average consecutive row segments into one row each."""
    lengths = np.asarray(segment_lengths, dtype=np.intp)
    if lengths.size == 0 or np.any(lengths < 1):
        raise ValueError("every segment must contain at least one row")
    if int(lengths.sum()) != x.value.shape[0]:
        raise ValueError(f"segment lengths sum to {int(lengths.sum())}, "
                         f"but input has {x.value.shape[0]} rows")
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    sums = np.add.reduceat(x.value, offsets, axis=0)
    out = Node(x.tape, "mean_pool_rows", sums / lengths[:, None], (x,))

    def backward():
        x.grad += np.repeat(out.grad / lengths[:, None], lengths, axis=0)

    out._backward = backward
    return out


def scale_by_exp(x: Node, s: Node) -> Node:
    """Multiply every entry of x by exp(s), s a 1x1 scalar node."""
    tape = _same_tape(x, s)
    if s.value.shape != (1, 1):
        raise ValueError(f"scale must be a 1x1 node, got shape {s.value.shape}")
    factor = np.exp(s.value[0, 0])
    out = Node(tape, "scale_by_exp", x.value * factor, (x, s))

    def backward():
        x.grad += out.grad * factor
        s.grad += np.sum(out.grad * out.value)

    out._backward = backward
    return out


def finite_difference_check(build_loss: Callable[[dict[str, np.ndarray]], Node],
                            params: dict[str, np.ndarray],
                            step: float = 1e-5,
                            max_coords_per_param: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must deterministically rebuild the graph from the given
    parameter values and return the scalar loss node. Returns the maximum
    over checked coordinates of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-12). When ``max_coords_per_param`` is set, coordinates
    are subsampled per parameter using ``rng``.
    """
    params = {name: as_matrix(value).copy() for name, value in params.items()}
    loss = build_loss(params)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"loss is not finite: {loss.item()}")
    analytic = loss.tape.backward(loss)
    missing = set(params) - set(analytic)
    if missing:
        raise ValueError(f"builder did not register parameters: {sorted(missing)}")

    def loss_at(values: dict[str, np.ndarray]) -> float:
        node = build_loss(values)
        out = node.item()
        if not np.isfinite(out):
            raise FloatingPointError(f"loss is not finite: {out}")
        return out

    max_rel_err = 0.0
    for name in sorted(params):
        base = params[name]
        coords = [(r, c) for r in range(base.shape[0]) for c in range(base.shape[1])]
        if max_coords_per_param is not None and len(coords) > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            chosen = rng.choice(len(coords), size=max_coords_per_param, replace=False)
            coords = [coords[int(i)] for i in chosen]
        for r, c in coords:
            original = base[r, c]
            base[r, c] = original + step
            up = loss_at(params)
            base[r, c] = original - step
            down = loss_at(params)
            base[r, c] = original
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name][r, c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            max_rel_err = max(max_rel_err, rel)
    return max_rel_err
