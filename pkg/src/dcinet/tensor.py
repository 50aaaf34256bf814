"""Dense float64 tensors with a define-by-run gradient tape.

A :class:`Tape` records every differentiable op executed while it is active.
Ops executed with no active tape (inference, finite differences) record
nothing and cost nothing extra.

    with Tape() as tape:
        loss = ops.mean(ops.mul(x, x))
    grads = tape.backward(loss)
    grads[x]  # -> ndarray, same shape as x
"""

from __future__ import annotations

import os
import weakref
from typing import Callable, Optional, Sequence

import numpy as np

MAX_RANK = 5

# Finite-value check after every forward op; off unless explicitly requested.
DEBUG = os.environ.get("DCINET_DEBUG", "") not in ("", "0")

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable-by-convention N-D array of float64 values.

    ``requires_grad`` marks leaves (parameters, probed inputs) whose gradient
    the tape should report. Outputs of recorded ops carry a ``node``.
    """

    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


class Node:
    # The output is held weakly: Tensor -> Node -> Tensor would otherwise form
    # a cycle per op and keep whole activations alive until a full GC pass.
    __slots__ = ("op", "inputs", "_output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self._output = weakref.ref(output)
        self.backward_fn = backward_fn

    @property
    def output(self) -> Optional[Tensor]:
        return self._output()


class Tape:
    """Append-only op record. Nodes are stored in execution order, which is a
    valid topological order since an op's inputs exist before it runs."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable) -> None:
        node = Node(op, inputs, output, backward_fn)
        output.node = node
        self.nodes.append(node)

    def backward(self, root: Tensor) -> dict:
        """Reverse sweep from a single-element ``root``.

        Returns a map ``Tensor -> ndarray`` holding the gradient of ``root``
        for every tensor on the tape reachable from it, leaves included.
        Leaves that do not influence ``root`` are absent.
        """
        if root.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
        if root.node is None or not any(n is root.node for n in reversed(self.nodes)):
            raise ValueError("backward() root was not produced on this tape")
        grads: dict = {root: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            out = node.output
            g = None if out is None else grads.get(out)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"{node.op} backward produced {gi.shape} for input {inp.shape}")
                prev = grads.get(inp)
                grads[inp] = gi if prev is None else prev + gi
        return grads


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when any input needs
    a gradient. ``backward_fn(g)`` returns one gradient (or None) per input."""
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(root: Tensor) -> dict:
    """Backward on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise ValueError("backward() called with no active tape")
    return tape.backward(root)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
