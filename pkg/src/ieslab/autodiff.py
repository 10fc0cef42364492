"""Tape-based reverse-mode autodiff over dense float64 arrays.

Only the handful of primitives an MLP classifier needs are provided. Every op
takes an optional ``tape``; with ``tape=None`` the op runs forward only, which
is what the evaluation passes use.

    tape = Tape()
    w = Tensor(w0, requires_grad=True)
    loss = mean(softmax_cross_entropy(matmul(x, w, tape), y, tape), tape)
    (gw,) = backward(tape, loss, [w])
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeStateError(RuntimeError):
    pass


class Tensor:
    """Dense row-major float64 array with a stable identity for the tape."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient per input (None = no contribution)
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, op, inputs, output, backward_fn):
        if self.consumed:
            raise TapeStateError("tape already consumed by backward(); record a new forward pass")
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _wants_grad(tape, *tensors):
    return tape is not None and any(t.requires_grad for t in tensors)


def _result(tape, op, inputs, data, backward_fn) -> Tensor:
    out = Tensor(_finite(data, op), requires_grad=_wants_grad(tape, *inputs))
    if out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _result(tape, "matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add_bias(x: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Row-broadcast add: ``x[b, n] + bias[n]``."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows {x.shape}")
    return _result(tape, "add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(tape, "add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _result(tape, "mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float, tape: Optional[Tape] = None) -> Tensor:
    return _result(tape, "scale", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    # subgradient at exactly 0 is 0; NaN would otherwise be masked to 0
    mask = _finite(x.data, "relu") > 0
    return _result(tape, "relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def total(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = a.shape
    return _result(tape, "sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _result(tape, "mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, g / n),))


def weighted_sum(a: Tensor, weights, tape: Optional[Tape] = None) -> Tensor:
    """``sum_i weights[i] * a[i]`` for a vector ``a``; weights are constants."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs values {a.shape}")
    return _result(tape, "weighted_sum", (a,), np.asarray(a.data @ w), lambda g: (g * w,))


def softmax_cross_entropy(logits: Tensor, labels, tape: Optional[Tape] = None) -> Tensor:
    """Per-sample cross-entropy ``logsumexp(z_i) - z_i[y_i]``, shape ``[b]``."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    b, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != b:
        raise DimensionError(f"softmax_cross_entropy: {y.shape[0]} labels for {b} rows")
    if b and (y.min() < 0 or y.max() >= c):
        bad = int(y[(y < 0) | (y >= c)][0])
        raise IndexError(f"label {bad} out of range for {c} classes")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1)
    rows = np.arange(b)
    # max(..., 0) clips the -0.0/-1e-17 rounding residue of a dominant logit
    loss = np.maximum(np.log(sum_exp) - shifted[rows, y], 0.0)

    def back(g):
        probs = exp / sum_exp[:, None]
        probs[rows, y] -= 1.0
        return (probs * g[:, None],)

    return _result(tape, "softmax_cross_entropy", (logits,), loss, back)


def backward(tape: Optional[Tape], loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get a zero gradient. The tape is
    consumed: a second call raises ``TapeStateError``.
    """
    if tape is None or not tape.nodes:
        raise TapeStateError("backward() called before any forward pass was recorded")
    if tape.consumed:
        raise TapeStateError("tape already consumed by an earlier backward()")
    if loss.data.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.nodes[-1].output is not loss and not any(n.output is loss for n in tape.nodes):
        raise TapeStateError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    tape.nodes.clear()
    tape.consumed = True
    return [_finite(np.asarray(grads.get(t.id, np.zeros_like(t.data))), "backward") for t in wrt]
