"""Tensor + tape: the bit of reverse-mode autodiff the NCA actually needs.

A ``Tensor`` is a numpy array with a couple of extra fields. Ops (see
``ops.py``) only record themselves when a tape is active *and* one of their
inputs requires grad, so plain inference never pays for the bookkeeping.

Usage::

    with Tape() as tape:
        loss = some_loss(model_forward(...))
    grads = tape.backward(loss, model.parameters())

A tape runs backward exactly once. A second call raises ``TapeError``;
the recorded intermediates are released after the first pass.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from src.errors import ShapeError, TapeError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    """Innermost tape entered on *this* thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float array with an optional link into the active tape.

    Images and NCA states are (n, c, h, w), row-major with w fastest, which
    is just numpy's C order. Losses come out as 0-d tensors.
    """

    __slots__ = ("data", "requires_grad", "name", "grad_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        # Index into the tape's entries; None for leaves and constants.
        self.grad_node: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def parameter(cls, data, name: str | None = None) -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}",
                             dimension="size", expected=1, actual=self.data.size)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    # Operator sugar; the real work is in ops.py.
    def __add__(self, other):
        from src.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from src.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from src.autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from src.autodiff import ops
        return ops.div(other, self)

    def __neg__(self):
        from src.autodiff import ops
        return ops.scalar_mul(self, -1.0)

    def __repr__(self) -> str:
        grad = ", requires_grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{grad})"


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable ops. Single owner, single use."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, kind: str, inputs: Iterable[Tensor], output: Tensor,
               backward: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("tape already ran backward; start a new one")
        # Inputs were recorded before us (or are leaves), so append order is
        # already topological.
        output.grad_node = len(self.entries)
        output._tape = self
        self.entries.append(TapeEntry(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` for every tensor in ``params``.

        Parameters the loss doesn't depend on get zeros.
        """
        if loss._tape is not self:
            raise TapeError("loss was not produced under this tape")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape replay rejected: backward already ran on this tape")
        self.consumed = True

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            grad_out = adjoints.pop(id(entry.output), None)
            if grad_out is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(grad_out)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                adjoints[key] = adjoints[key] + grad if key in adjoints else grad

        grads = {}
        for name, param in params.items():
            grad = adjoints.get(id(param))
            grads[name] = np.zeros_like(param.data) if grad is None else grad.astype(param.dtype, copy=False)
        # Intermediates can be large (whole rollouts); let them go.
        self.entries = []
        return grads


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """``loss``'s own tape runs backward. Raises if there isn't one."""
    if loss._tape is None:
        raise TapeError("backward called outside a tape context (loss has no recorded history)")
    return loss._tape.backward(loss, params)


def merge_gradients(maps: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum per-worker gradient maps, always in list order."""
    if not maps:
        return {}
    merged = {name: np.array(grad, copy=True) for name, grad in maps[0].items()}
    for other in maps[1:]:
        if other.keys() != merged.keys():
            raise ShapeError("gradient maps disagree on parameter names", dimension="names")
        for name, grad in other.items():
            merged[name] += grad
    return merged
