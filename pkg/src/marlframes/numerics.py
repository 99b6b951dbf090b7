"""Dense float64 matrices with a single-use reverse-mode tape and Adam.

Every value is a 2-D ``numpy`` array (rows x cols).  Operations record a
node on the tape owned by their operands; :meth:`Tape.backward` walks the
nodes in reverse creation order, which is a valid topological order because
an operand always exists before the node that consumes it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Tape misuse: mixed tapes, reused tape, non-scalar seed."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally reshaping row-major."""
    arr = np.asarray(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"{arr.size} values cannot fill a {rows}x{cols} matrix")
        arr = arr.reshape(rows, cols)
    elif arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite values")
    return arr


class Node:
    """A tape entry.  ``needs`` is false for constants and anything built only
    from constants; such nodes keep no parents and never receive a gradient.
    ``grad`` stays ``None`` until something flows into it."""

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "name", "needs")

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple["Node", ...] = (),
                 backward_fn: Callable[[np.ndarray], None] | None = None,
                 name: str | None = None, needs: bool | None = None):
        self.tape = tape
        self.value = value
        self.grad = None
        if needs is None:
            needs = False
            for p in parents:
                if p.needs:
                    needs = True
                    break
        self.needs = needs
        self.parents = parents if needs else ()
        self.backward_fn = backward_fn if needs else None
        self.name = name

    def accumulate(self, g) -> None:
        if self.grad is None:
            if getattr(g, "shape", None) == self.value.shape:
                self.grad = g.copy()
            else:
                self.grad = np.broadcast_to(g, self.value.shape).astype(np.float64)
        else:
            self.grad += g

    def zero_grad_if_unset(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} {self.value.shape[0]}x{self.value.shape[1]}>"


class Tape:
    """Records operations for one forward pass; backward may run once."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._used = False

    def _record(self, value, parents=(), backward_fn=None, name=None, needs=None) -> Node:
        node = Node(self, value, parents, backward_fn, name, needs)
        self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            raise TapeError(f"parameter {name!r} already registered on this tape")
        node = self._record(np.asarray(value, dtype=np.float64), name=name, needs=True)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._record(as_matrix(value), needs=False)

    def backward(self, seed: Node) -> dict[str, np.ndarray]:
        """Reverse accumulation from a scalar ``seed``; returns parameter grads."""
        if seed.tape is not self:
            raise TapeError("seed node belongs to a different tape")
        if seed.value.shape != (1, 1):
            raise TapeError(f"backward seed must be 1x1, got {seed.value.shape}")
        if self._used:
            raise TapeError("tape already consumed by a previous backward pass")
        self._used = True
        seed.grad = np.ones((1, 1))
        # only nodes reachable from the seed take part
        live = {id(seed)}
        for node in reversed(self.nodes):
            if id(node) not in live:
                continue
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
            for parent in node.parents:
                live.add(id(parent))
        return {name: np.zeros_like(node.value) if node.grad is None else node.grad.copy()
                for name, node in self.params.items()}


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise TapeError("operands recorded on different tapes")
    return tape


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    tape = _tape_of(a, b)

    def back(g):
        if a.needs:
            a.accumulate(g @ b.value.T)
        if b.needs:
            b.accumulate(a.value.T @ g)

    return tape._record(a.value @ b.value, (a, b), back)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over ``a``'s rows."""
    tape = _tape_of(a, b)
    if a.shape == b.shape:
        def back(g):
            if a.needs:
                a.accumulate(g)
            if b.needs:
                b.accumulate(g)
    elif b.shape == (1, a.shape[1]):
        def back(g):
            if a.needs:
                a.accumulate(g)
            if b.needs:
                b.accumulate(g.sum(axis=0, keepdims=True))
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return tape._record(a.value + b.value, (a, b), back)


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    tape = _tape_of(a, b)

    def back(g):
        if a.needs:
            a.accumulate(g)
        if b.needs:
            b.accumulate(-g)

    return tape._record(a.value - b.value, (a, b), back)


def hadamard(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} * {b.shape}")
    tape = _tape_of(a, b)

    def back(g):
        if a.needs:
            a.accumulate(g * b.value)
        if b.needs:
            b.accumulate(g * a.value)

    return tape._record(a.value * b.value, (a, b), back)


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)

    def back(g):
        if a.needs:
            a.accumulate(factor * g)

    return a.tape._record(a.value * factor, (a,), back)


def one_minus(a: Node) -> Node:
    def back(g):
        if a.needs:
            a.accumulate(-g)

    return a.tape._record(1.0 - a.value, (a,), back)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)

    def back(g):
        if a.needs:
            a.accumulate(g * (1.0 - out * out))

    return a.tape._record(out, (a,), back)


def sigmoid(a: Node) -> Node:
    x = a.value
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        if a.needs:
            a.accumulate(g * out * (1.0 - out))

    return a.tape._record(out, (a,), back)


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def back(g):
        if a.needs:
            a.accumulate(g * out)

    return a.tape._record(out, (a,), back)


def concat_cols(*parts: Node) -> Node:
    if not parts:
        raise ShapeError("concat_cols needs at least one operand")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    tape = _tape_of(*parts)
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs:
                p.accumulate(g[:, lo:hi])

    return tape._record(np.concatenate([p.value for p in parts], axis=1), parts, back)


def take_rows(a: Node, index: Sequence[int]) -> Node:
    """Gather rows by index (repeats allowed); gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("take_rows needs a non-empty 1-D index")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def back(g):
        if a.needs:
            np.add.at(a.zero_grad_if_unset(), idx, g)

    return a.tape._record(a.value[idx], (a,), back)


def pick_cols(a: Node, cols: Sequence[int]) -> Node:
    """Row-wise gather: output[i, 0] = a[i, cols[i]]."""
    c = np.asarray(cols, dtype=np.intp)
    if c.shape != (a.shape[0],):
        raise ShapeError(f"pick_cols needs one column per row ({a.shape[0]}), got {c.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        if a.needs:
            a.zero_grad_if_unset()[rows, c] += g[:, 0]

    return a.tape._record(a.value[rows, c][:, None], (a,), back)


def sum_all(a: Node) -> Node:
    def back(g):
        if a.needs:
            a.accumulate(g[0, 0])

    return a.tape._record(np.array([[a.value.sum()]]), (a,), back)


def sum_cols(a: Node) -> Node:
    """Row sums as a rows x 1 column."""

    def back(g):
        if a.needs:
            a.accumulate(g)

    return a.tape._record(a.value.sum(axis=1, keepdims=True), (a,), back)


def mean_rows(a: Node) -> Node:
    """Column means as a 1 x cols row."""
    n = a.shape[0]

    def back(g):
        if a.needs:
            a.accumulate(g / n)

    return a.tape._record(a.value.mean(axis=0, keepdims=True), (a,), back)


def log_softmax_rows(a: Node) -> Node:
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def back(g):
        if a.needs:
            a.accumulate(g - soft * g.sum(axis=1, keepdims=True))

    return a.tape._record(out, (a,), back)


def log_softmax_row(a: Node) -> Node:
    if a.shape[0] != 1:
        raise ShapeError(f"log_softmax_row expects a 1xn row, got {a.shape}")
    return log_softmax_rows(a)


def cross_entropy_from_logits(logits: Node, label: int) -> Node:
    """-log softmax(logits)[label] for a 1 x C row of logits."""
    if logits.shape[0] != 1:
        raise ShapeError(f"cross entropy expects 1xC logits, got {logits.shape}")
    n_classes = logits.shape[1]
    if not 0 <= label < n_classes:
        raise IndexError(f"label {label} outside [0, {n_classes})")
    x = logits.value
    shifted = x - x.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    onehot = np.zeros_like(x)
    onehot[0, label] = 1.0

    def back(g):
        if logits.needs:
            logits.accumulate(g[0, 0] * (np.exp(logp) - onehot))

    return logits.tape._record(np.array([[-logp[0, label]]]), (logits,), back)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax on plain arrays (no tape)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "hadamard": hadamard,
    "scale": scale,
    "concat_cols": concat_cols,
}


def elementwise(op: str, *args):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    check_finite(grads)
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays, inputs untouched."""
    check_finite(grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def numeric_gradient(f: Callable[[dict[str, np.ndarray]], float],
                     params: dict[str, np.ndarray], step: float = 1e-5,
                     names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central finite differences of scalar ``f`` with respect to every entry."""
    work = {k: v.copy() for k, v in params.items()}
    grads = {}
    for name in (names if names is not None else params):
        arr = work[name]
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + step
            hi = f(work)
            arr[i] = old - step
            lo = f(work)
            arr[i] = old
            g[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                       floor: float = 1e-6) -> tuple[float, str]:
    """Largest |a - n| / max(|a|, |n|, floor) over all entries, with its parameter."""
    worst, where = 0.0, ""
    for name, n in numeric.items():
        a = analytic[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        e = float(err.max()) if err.size else 0.0
        if e > worst:
            worst, where = e, name
    return worst, where
