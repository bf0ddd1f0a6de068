"""Minimal tape-based reverse-mode automatic differentiation.

Values are float64 numpy arrays wrapped in :class:`Tensor`.  Operations are
recorded on the innermost active :class:`Tape` whenever at least one input is
traced (a ``requires_grad`` leaf or a value produced on that tape).
Gradients are accumulated by walking the tape backwards, in recording order,
so a given graph always reduces in the same sequence.

Typical use::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(x, w))
    grads = tape.backward(loss)
    grads[w]
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DimensionError

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def serial_reductions():
    """Pin BLAS to one thread so every reduction runs in a fixed serial order."""
    with threadpool_limits(limits=1):
        yield


class Tensor:
    """Dense float64 array with optional tape membership."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all of these route through the recorded primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple[np.ndarray | None, ...]]


@dataclass
class _Entry:
    op: _Op
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict = field(default_factory=dict)
    ctx: Any = None


class Tape:
    """Ordered record of primitive operations.

    A tape is single-writer; independent graphs should use independent tapes.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def traces(self, t: Tensor) -> bool:
        return t._tape is self or t.requires_grad

    def _record(self, entry: _Entry) -> None:
        entry.output._tape = self
        self.entries.append(entry)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(node) for every traced node reachable from ``loss``.

        Leaves with ``requires_grad`` also get their ``.grad`` attribute set.
        """
        if loss._tape is not self:
            raise RuntimeError("backward called on a node that was not recorded on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        nodes: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            arrays = [t.data for t in entry.inputs]
            in_grads = entry.op.backward(g, entry.ctx, entry.output.data, *arrays, **entry.attrs)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not self.traces(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    nodes[key] = t
        out = {}
        for key, g in grads.items():
            t = nodes[key]
            t.grad = g
            out[t] = g
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the leaf values, in order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for entry in self.entries:
            arrays = [values.get(id(t), t.data) for t in entry.inputs]
            val, _ = entry.op.forward(*arrays, **entry.attrs)
            values[id(entry.output)] = val
            outs.append(val)
        return outs


def _apply(op: _Op, inputs: Sequence[Tensor], **attrs) -> Tensor:
    arrays = [t.data for t in inputs]
    val, ctx = op.forward(*arrays, **attrs)
    out = Tensor(val)
    tape = active_tape()
    if tape is not None and any(tape.traces(t) for t in inputs):
        tape._record(_Entry(op, tuple(inputs), out, attrs, ctx))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- primitives -------------------------------------------------------------

def _matmul_fwd(a, b):
    return a @ b, None


def _matmul_bwd(g, ctx, out, a, b):
    return g @ b.T, a.T @ g


_MATMUL = _Op("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _apply(_MATMUL, (a, b))


def _add_fwd(a, b):
    return a + b, None


def _add_bwd(g, ctx, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


_ADD = _Op("add", _add_fwd, _add_bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias rows)."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    return _apply(_ADD, (a, b))


def _relu_fwd(x):
    return np.maximum(x, 0.0), None


def _relu_bwd(g, ctx, out, x):
    # subgradient at exactly 0 is 0
    return (g * (x > 0.0),)


_RELU = _Op("relu", _relu_fwd, _relu_bwd)


def relu(x: Tensor) -> Tensor:
    return _apply(_RELU, (x,))


def _scale_fwd(x, *, c):
    return x * c, None


def _scale_bwd(g, ctx, out, x, *, c):
    return (g * c,)


_SCALE = _Op("scale", _scale_fwd, _scale_bwd)


def scale(x: Tensor, c: float) -> Tensor:
    return _apply(_SCALE, (x,), c=float(c))


def _sum_fwd(x):
    return np.asarray(x.sum()), None


def _sum_bwd(g, ctx, out, x):
    return (np.broadcast_to(g, x.shape).copy(),)


_SUM = _Op("sum", _sum_fwd, _sum_bwd)


def sum_all(x: Tensor) -> Tensor:
    return _apply(_SUM, (x,))


def _sumsq_fwd(x):
    return np.asarray(np.sum(x * x)), None


def _sumsq_bwd(g, ctx, out, x):
    return (2.0 * g * x,)


_SUMSQ = _Op("sum_squares", _sumsq_fwd, _sumsq_bwd)


def sum_squares(x: Tensor) -> Tensor:
    """Squared Frobenius norm."""
    return _apply(_SUMSQ, (x,))


def _sce_fwd(logits, *, targets):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    per_sample = lse - shifted[rows, targets]
    probs = np.exp(shifted - lse[:, None])
    return np.asarray(per_sample.mean()), probs


def _sce_bwd(g, probs, out, logits, *, targets):
    d = probs.copy()
    d[np.arange(logits.shape[0]), targets] -= 1.0
    return (d * (g / logits.shape[0]),)


_SCE = _Op("softmax_cross_entropy", _sce_fwd, _sce_bwd)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch mean of ``-log softmax(logits)[target]`` via a stabilized log-sum-exp."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise DimensionError(f"targets shape {targets.shape} does not match batch {logits.shape[0]}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError(
            f"target index out of range [0, {logits.shape[1]}): "
            f"min={targets.min()}, max={targets.max()}"
        )
    return _apply(_SCE, (logits,), targets=targets)


def _l2_fwd(pred, target):
    diff = pred - target
    return np.asarray(0.5 * np.mean(diff * diff)), None


def _l2_bwd(g, ctx, out, pred, target):
    d = (pred - target) * (g / pred.size)
    return d, -d


_L2 = _Op("l2_loss", _l2_fwd, _l2_bwd)


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Half the elementwise mean squared error, ``0.5 * mean((pred - target)**2)``."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l2_loss shape mismatch: {pred.shape} vs {target.shape}")
    return _apply(_L2, (pred, target))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)
