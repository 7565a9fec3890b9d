"""Dense float64 tensors and the gradient tape that records operations on them."""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


class ContractError(ValueError):
    """Raised when a call violates an operation's precondition."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "tfanet_active_tape", default=None
)


class Tensor:
    """A float64 array with an optional gradient flag.

    Values are checked for finiteness on construction so NaN or Inf never
    travel silently through the pipeline.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Gradients:
    """Mapping from tensors to accumulated gradients.

    Tensors that never fed into the loss get an exact zero array.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


class Tape:
    """Records differentiable operations while active.

    Use as a context manager; operations on tensors that require gradients
    are appended in execution order and replayed in reverse by
    :meth:`backward`.  A tape belongs to one thread of execution at a time.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append(_Record(out, inputs, vjp))

    def backward(self, loss: Tensor, visit: Callable[[int], None] | None = None) -> Gradients:
        return backward(loss, self, visit=visit)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(out: Tensor, inputs: Iterable[Tensor], vjp: Callable) -> Tensor:
    """Attach ``out`` to the active tape when any input needs a gradient.

    ``vjp(g)`` must return one gradient (or None) per input, already shaped
    like that input.
    """
    inputs = tuple(inputs)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape, visit: Callable[[int], None] | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    ``visit`` is called with each record index as it is processed, which lets
    tests confirm the reverse ordering.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for idx in range(len(tape.records) - 1, -1, -1):
        rec = tape.records[idx]
        g = grads.get(id(rec.out))
        if g is None:
            continue
        if visit is not None:
            visit(idx)
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t
    return Gradients(grads, tensors)
