"""Dense float64 matrices with tape-based reverse-mode differentiation.

Values are 2-D ``numpy.float64`` arrays. Every differentiable operation
appends a :class:`Node` to the :class:`Tape` of its inputs; :func:`backward`
walks the tape in reverse and accumulates gradients into every node.

Also here: Adam, central finite differences and a splitmix64 generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

PROB_FLOOR = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    """Coerce scalars, vectors and nested lists to a 2-D float64 array."""
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {a.shape}")
    return a


# --------------------------------------------------------------------------
# Tape and nodes
# --------------------------------------------------------------------------


class Node:
    __slots__ = ("tape", "id", "op", "parents", "value", "grad", "_backward", "name")

    def __init__(self, tape: Tape, op: str, parents: tuple, value: np.ndarray, backward=None, name=None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.value = value
        self.grad: np.ndarray | None = None
        self._backward = backward
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.id}<{self.op}{label} {self.value.shape[0]}x{self.value.shape[1]}>"

    # operator sugar
    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)

    def __add__(self, other: Node) -> Node:
        return add(self, other)

    def __mul__(self, other: Node) -> Node:
        return hadamard(self, other)


class Tape:
    """Topologically ordered record of a forward computation.

    A tape is single-use: build it, call :func:`backward` once, read grads.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value) -> Node:
        node = Node(self, "leaf", (), as_matrix(value), name=name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return Node(self, "const", (), as_matrix(value))

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self.params.items()
        }


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _accum(node: Node, g: np.ndarray) -> None:
    if node.op == "const":
        return
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients of named leaves."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape[0]}x{loss.shape[1]}")
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    return tape.grads()


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}")
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def back(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return Node(tape, "matmul", (a, b), av @ bv, back)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return Node(tape, "add", (a, b), a.value + b.value, back)


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return Node(tape, "add", (a, b), a.value - b.value, back)


def add_bias(m: Node, bias: Node) -> Node:
    """Add a 1xC row to every row of an NxC matrix."""
    if bias.shape != (1, m.shape[1]):
        raise ShapeError(f"bias of shape {bias.shape} does not fit {m.shape[0]}x{m.shape[1]}")
    tape = _same_tape(m, bias)

    def back(g):
        _accum(m, g)
        _accum(bias, g.sum(axis=0, keepdims=True))

    return Node(tape, "add", (m, bias), m.value + bias.value, back)


def hadamard(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def back(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return Node(tape, "hadamard", (a, b), av * bv, back)


def scale(m: Node, c: float) -> Node:
    def back(g):
        _accum(m, g * c)

    return Node(m.tape, "hadamard", (m,), m.value * c, back)


def one_minus(m: Node) -> Node:
    def back(g):
        _accum(m, -g)

    return Node(m.tape, "add", (m,), 1.0 - m.value, back)


def sigmoid(m: Node) -> Node:
    x = m.value
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(m, g * out * (1.0 - out))

    return Node(m.tape, "sigmoid", (m,), out, back)


def tanh(m: Node) -> Node:
    out = np.tanh(m.value)

    def back(g):
        _accum(m, g * (1.0 - out * out))

    return Node(m.tape, "tanh", (m,), out, back)


def relu(m: Node) -> Node:
    mask = m.value > 0
    out = np.where(mask, m.value, 0.0)

    def back(g):
        _accum(m, g * mask)

    return Node(m.tape, "relu", (m,), out, back)


def softmax_values(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m: Node) -> Node:
    if m.value.size == 0:
        raise ShapeError("softmax of an empty matrix")
    p = softmax_values(m.value)

    def back(g):
        _accum(m, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return Node(m.tape, "softmax-rows", (m,), p, back)


def dropout(m: Node, rate: float, rng: Rng | None, train: bool) -> Node:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return m
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.uniform(m.value.size).reshape(m.shape) >= rate) / (1.0 - rate)

    def back(g):
        _accum(m, g * keep)

    return Node(m.tape, "dropout", (m,), m.value * keep, back)


def cross_entropy(probs: Node, labels: Sequence[int] | int) -> Node:
    """Mean of ``-log p[label]`` over rows; labels are 1-based class indices.

    Probabilities are floored at 1e-12 before the log.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = probs.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} probability rows")
    if labels.min() < 1 or labels.max() > c:
        raise ValueError(f"label out of range 1..{c}: {labels.tolist()}")
    rows = np.arange(n)
    picked = probs.value[rows, labels - 1]
    floored = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(floored).mean()

    def back(g):
        grad = np.zeros_like(probs.value)
        live = picked > PROB_FLOOR
        grad[rows[live], labels[live] - 1] = -g[0, 0] / (floored[live] * n)
        _accum(probs, grad)

    return Node(probs.tape, "cross-entropy", (probs,), np.array([[loss]]), back)


def slice_cols(m: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= m.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] outside 0..{m.shape[1]}")

    def back(g):
        full = np.zeros_like(m.value)
        full[:, start:stop] = g
        _accum(m, full)

    return Node(m.tape, "slice", (m,), m.value[:, start:stop].copy(), back)


def concat_rows(parts: Sequence[Node]) -> Node:
    tape = _same_tape(*parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat needs equal column counts, got {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[lo:hi])

    return Node(tape, "concat", tuple(parts), np.vstack([p.value for p in parts]), back)


def transpose(m: Node) -> Node:
    def back(g):
        _accum(m, g.T)

    return Node(m.tape, "slice", (m,), m.value.T.copy(), back)


def gather_rows(m: Node, index: Sequence[int], n_out: int) -> Node:
    """Rows ``m[index]`` stacked, padded with zero rows up to ``n_out``."""
    index = np.asarray(index, dtype=np.int64)
    if index.size > n_out:
        raise ShapeError(f"{index.size} rows requested into {n_out} slots")
    out = np.zeros((n_out, m.shape[1]))
    out[: index.size] = m.value[index]

    def back(g):
        full = np.zeros_like(m.value)
        np.add.at(full, index, g[: index.size])
        _accum(m, full)

    return Node(m.tape, "slice", (m,), out, back)


def scale_rows(m: Node, s: Node) -> Node:
    """Multiply row i of ``m`` (NxC) by ``s[i, 0]`` (s is Nx1)."""
    if s.shape != (m.shape[0], 1):
        raise ShapeError(f"row scales of shape {s.shape} do not fit {m.shape}")
    tape = _same_tape(m, s)
    mv, sv = m.value, s.value

    def back(g):
        _accum(m, g * sv)
        _accum(s, (g * mv).sum(axis=1, keepdims=True))

    return Node(tape, "hadamard", (m, s), mv * sv, back)


def total(m: Node) -> Node:
    def back(g):
        _accum(m, np.full_like(m.value, g[0, 0]))

    return Node(m.tape, "add", (m,), np.array([[m.value.sum()]]), back)


def l2_normalize(v: Node) -> Node:
    """``v / ||v||`` for a column or row vector; zero vectors are rejected."""
    norm = float(np.sqrt((v.value**2).sum()))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    u = v.value / norm

    def back(g):
        _accum(v, (g - u * (g * u).sum()) / norm)

    return Node(v.tape, "hadamard", (v,), u, back)


def block_propagate(blocks: np.ndarray, h: Node) -> Node:
    """Apply per-graph constant operators to a stacked node matrix.

    ``blocks`` has shape (B, n, n) and ``h`` has B*n rows; block b multiplies
    rows ``b*n:(b+1)*n``. Used for padded batches of normalized adjacencies.
    """
    b, n, n2 = blocks.shape
    if n != n2 or h.shape[0] != b * n:
        raise ShapeError(f"blocks {blocks.shape} do not fit node matrix {h.shape}")
    d = h.shape[1]
    out = np.matmul(blocks, h.value.reshape(b, n, d)).reshape(b * n, d)
    bt = blocks.transpose(0, 2, 1)

    def back(g):
        _accum(h, np.matmul(bt, g.reshape(b, n, d)).reshape(b * n, d))

    return Node(h.tape, "matmul", (h,), out, back)


# --------------------------------------------------------------------------
# Optimizer and verification helpers
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def finite_diff_grad(
    fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays."""
    if h <= 0:
        raise ValueError("step h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = fn(work)
            arr[idx] = orig - h
            fm = fn(work)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], floor: float = 1e-6) -> float:
    """Largest entrywise ``|a-b| / max(|a|, |b|, floor)`` across all arrays."""
    worst = 0.0
    for k in a:
        x, y = a[k], b[k]
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float((np.abs(x - y) / denom).max()))
    return worst


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (already advanced)."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (used for per-trial streams)."""
    s = 0
    for p in parts:
        s = splitmix64((s ^ (int(p) & _MASK64)) + _GAMMA)
    return s


class Rng:
    """splitmix64 stream. Bulk draws are vectorized over the counter."""

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return splitmix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return z

    def uniform(self, n: int | None = None):
        """Floats in [0, 1) from the top 53 bits; scalar when ``n`` is None."""
        if n is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[n:])

    def glorot(self, rows: int, cols: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (rows + cols))
        return (2.0 * self.uniform(rows * cols) - 1.0).reshape(rows, cols) * limit

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        draws = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] * (i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def choice(self, items: Sequence, weights: Iterable[float]):
        w = np.asarray(list(weights), dtype=np.float64)
        u = self.uniform() * w.sum()
        return items[min(int(np.searchsorted(np.cumsum(w), u, side="right")), len(items) - 1)]

    def exponential(self, mean: float) -> float:
        return -mean * np.log(1.0 - self.uniform())
