"""Tensor values and the tape that records primitive applications."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPES: list["Tape"] = []
_GRAD_ENABLED = [True]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of primitive applications.

    Records are appended in evaluation order, which is a topological order of
    the computation; :meth:`backward` walks them in reverse exactly once.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
        """Reverse-mode sweep from a scalar ``loss``.

        Leaf tensors that require grad get ``.grad`` set; if ``params`` is given,
        their gradients are returned in order, zeros for unused parameters.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = set()
        for rec in reversed(self.records):
            produced.add(id(rec.out))
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise AssertionError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi.astype(t.dtype, copy=False)
                leaves[key] = t
        for key, g in grads.items():
            t = leaves.get(key)
            if t is not None and key not in produced:
                t.grad = g if t.grad is None else t.grad + g
        if loss.requires_grad and id(loss) not in produced:
            loss.grad = np.ones_like(loss.data)
        if params is None:
            return None
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out


def active_tape() -> Tape | None:
    if not _GRAD_ENABLED[-1] or not _TAPES:
        return None
    return _TAPES[-1]


@contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def make(op: str, data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    """Wrap a forward result and record it when any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, out, tuple(inputs), backward))
    return out
