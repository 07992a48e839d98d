"""Minimal reverse-mode autodiff: a ``Tensor`` wrapper over numpy arrays and a ``Tape``.

Operations only record onto a tape while one is open::

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
        tape.backward(loss)

Outside of an open tape every op behaves like plain numpy (no graph, no grads).
Backward walks the tape in strict reverse creation order, visiting each node once.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BackwardError

_TAPE_STACK: list[Optional["Tape"]] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an open tape."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """An f32 array with an optional gradient slot.

    ``requires_grad`` marks leaves (parameters, attacked inputs) whose ``grad``
    is filled by :meth:`Tape.backward`. Non-leaf tensors created on a tape
    carry a reference to their tape node.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def tape_id(self) -> Optional[int]:
        return self._index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar, implemented in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        from . import ops

        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    def mean(self):
        from . import ops

        return ops.mean_all(self)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    Node order is creation order, which is also a valid topological order.
    A tape can be consumed by :meth:`backward` exactly once; :meth:`reset`
    clears it for reuse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def record(self, op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
        if self.consumed:
            raise BackwardError("tape already consumed by backward(); call reset() first")
        out = Tensor(out_data, requires_grad=True, dtype=out_data.dtype)
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), out, backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor that ``loss`` depends on and that requires grad."""
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise BackwardError("loss was not recorded on this tape")
        if self.consumed:
            raise BackwardError("double backward through the same tape")
        self.consumed = True

        pending: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.data)}
        for index in range(loss._index, -1, -1):
            g = pending.pop(index, None)
            if g is None:
                continue
            node = self.nodes[index]
            node.output.grad = g
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    prev = pending.get(inp._index)
                    pending[inp._index] = ig if prev is None else prev + ig
                else:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
        # drop saved activations; the tape cannot be replayed
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Run backward on the tape that produced ``loss``.

    A leaf loss (no recorded ops) gets gradient one for itself.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if not loss.requires_grad:
            raise BackwardError("loss is not on an open tape")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    loss._tape.backward(loss)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data``; attach a tape node when recording and any input needs grad."""
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return tape.record(op, inputs, out_data, backward_fn)
    return Tensor(out_data, dtype=out_data.dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
