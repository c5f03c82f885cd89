"""Tensor container and the reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Primitives in :mod:`mde.diff.ops`
record themselves on every active :class:`GradTape` whenever one of their
inputs requires a gradient; :func:`backward` replays a tape in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class ContractError(ValueError):
    """A caller broke a precondition of the substrate."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while finiteness checking was on."""

    def __init__(self, primitive: str):
        super().__init__(f"primitive '{primitive}' produced non-finite values")
        self.primitive = primitive


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, ops.reciprocal(other))
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps d(loss)/d(output) to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered log of primitive applications.

    Use as a context manager; nested tapes each receive every record.
    ``check_finite`` makes each recorded primitive verify its output.
    """

    check_finite: bool = False
    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[GradTape] = []


def recording() -> bool:
    return bool(_ACTIVE)


def emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
         backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` and record it on the active tapes when needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    for tape in _ACTIVE:
        if tape.check_finite and not np.isfinite(out_data).all():
            raise NonFiniteError(op)
    if needs and _ACTIVE:
        rec = Record(op, tuple(inputs), out, backward_fn)
        for tape in _ACTIVE:
            tape.records.append(rec)
    return out


def backward(loss: Tensor, tape: GradTape,
             params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to named parameters.

    With ``params`` omitted, every named leaf that requires a gradient and
    appears on the tape is reported. Parameters the loss does not depend on
    get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        if rec.output is not loss:
            del grads[id(rec.output)]
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            seen[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if params is None:
        params = {t.name: t for t in seen.values() if t.name is not None}
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
    return out
