"""Tensors and the reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient::

    with Tape() as tape:
        y = ops.dense(x, w, b)
        loss = losses.mse_loss(y, target)
    tape.backward(loss)

A tape can be replayed backwards exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_active = []


class Tensor:
    """An N-d array of reals with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: object
    ctx: dict


class Tape:
    """Records operations in execution (hence topological) order."""

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def record(self, kind, inputs, output, backward, **ctx):
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(inputs), output, backward, ctx))

    def backward(self, loss, grad=None):
        """Propagate d(loss)/d(leaf) into every ``requires_grad`` tensor's ``.grad``."""
        if self._done:
            raise RuntimeError("backward already ran on this tape; run the forward pass again")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].output is not loss:
            raise ValueError("loss was not produced on this tape")
        self._done = True
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        loss.accumulate(seed)
        for node in reversed(self.nodes[:loss.node_id + 1]):
            g = node.output.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is not None and isinstance(t, Tensor) and t.requires_grad:
                    t.accumulate(gi)
            # intermediates are not leaves; drop their gradients once consumed
            if node.output.node_id is not None:
                node.output.grad = None
        loss.grad = None


def current_tape():
    return _active[-1] if _active else None


def record(kind, inputs, output, backward, **ctx):
    """Attach ``output`` to the active tape if any input needs a gradient."""
    tape = current_tape()
    if tape is None:
        return output
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(kind, inputs, output, backward, **ctx)
    return output


class Parameter:
    """A named model tensor; ``trainable=False`` for running statistics."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name, value, trainable=True):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = trainable
        self.trainable = trainable

    @property
    def data(self):
        return self.value.data

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def grad(self):
        g = self.value.grad
        return np.zeros_like(self.value.data) if g is None else g

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"
