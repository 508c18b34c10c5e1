"""Tensor, Parameter and Tape: the reverse-mode bookkeeping."""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class branch_log:
    """Collect fingerprints of the discrete choices ops make (relu masks, argmax, floors).

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what a finite-difference probe needs.
    """

    def __enter__(self) -> list:
        self.entries = []
        self._prev = getattr(_local, "branches", None)
        _local.branches = self.entries
        return self.entries

    def __exit__(self, *exc) -> None:
        _local.branches = self._prev


def note_branches(*arrays) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        for a in arrays:
            log.append(hashlib.blake2b(np.ascontiguousarray(a).tobytes(), digest_size=16).digest())


def active_tape() -> "Tape | None":
    """Innermost tape entered on the current thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array plus the flag telling the tape to track it.

    Tensors are treated as immutable values: no operation writes into
    ``data`` after construction.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient and a unique name."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of the differentiable operations run inside ``with tape:``.

    One tape is a single-writer context. Separate threads may each hold
    their own tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def record(data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Iterable], op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and register it on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward, op))
    return out


class Gradients:
    """Leaf gradients produced by one :func:`backward` call, keyed by tensor identity."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _add(self, tensor: Tensor, grad: np.ndarray) -> None:
        key = id(tensor)
        if key in self._items:
            self._items[key] = (tensor, self._items[key][1] + grad)
        else:
            self._items[key] = (tensor, grad)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        item = self._items.get(id(tensor))
        if item is None:
            return np.zeros_like(tensor.data)
        return item[1]

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._items

    def __len__(self) -> int:
        return len(self._items)


def backward(tape: Tape, loss: Tensor, accumulate: bool = True) -> Gradients:
    """Reverse-mode sweep of ``tape`` from the scalar ``loss``.

    Every Parameter reached gets ``dloss/dparam`` added to ``param.grad``
    (so successive calls sum). Gradients of all tracked leaves, Parameters
    or plain tensors built with ``requires_grad=True``, are returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = Gradients()
    if not loss.requires_grad:
        return leaves
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        leaves._add(loss, pending.pop(id(loss)))
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise RuntimeError(
                    f"{node.op}: gradient shape {gi.shape} does not match input {t.data.shape}")
            key = id(t)
            if key in produced:
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                leaves._add(t, gi)
    if accumulate:
        for t, g in leaves._items.values():
            if isinstance(t, Parameter):
                t.grad = t.grad + g
    return leaves
