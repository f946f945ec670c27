"""Dense tensor container and the elementwise arithmetic the pipeline builds on.

Tensors are immutable: 64-bit floats in flat row-major storage, no
broadcasting. Checkpoint arithmetic must never silently reshape, so every
shape disagreement is a hard error.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

__all__ = ["DenseTensor", "ParamSet", "ew_combine", "scale", "dot", "l2_norm"]


class DenseTensor:
    """An immutable dense float64 tensor stored flat in row-major order."""

    __slots__ = ("shape", "values")

    def __init__(self, shape: Iterable[int], values: np.ndarray):
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise ShapeMismatchError(f"dimensions must be positive, got {shape}")
        flat = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        if math.prod(shape) != flat.size:
            raise ShapeMismatchError(
                f"shape {shape} implies {math.prod(shape)} values, got {flat.size}"
            )
        if not np.all(np.isfinite(flat)):
            raise NonFiniteError("tensor values must be finite")
        flat = flat.copy()
        flat.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", flat)

    def __setattr__(self, name, value):
        raise AttributeError("DenseTensor is immutable")

    @classmethod
    def from_array(cls, array) -> DenseTensor:
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(arr.shape, arr)

    @classmethod
    def zeros(cls, shape: Iterable[int]) -> DenseTensor:
        shape = tuple(int(d) for d in shape)
        return cls(shape, np.zeros(math.prod(shape)))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def array(self) -> np.ndarray:
        """Read-only view reshaped to ``self.shape``."""
        return self.values.reshape(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.shape, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape}, n={self.size})"


class ParamSet:
    """An ordered, uniquely named collection of tensors (a full checkpoint).

    Iteration order is insertion order and is deterministic; instances are
    immutable and safe to share across threads.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Iterable[tuple[str, DenseTensor]]):
        table: dict[str, DenseTensor] = {}
        for name, tensor in entries:
            if not isinstance(name, str) or not name:
                raise ValueError(f"tensor name must be a nonempty string, got {name!r}")
            if name in table:
                raise ValueError(f"duplicate tensor name {name!r}")
            if not isinstance(tensor, DenseTensor):
                tensor = DenseTensor.from_array(tensor)
            table[name] = tensor
        object.__setattr__(self, "_entries", table)

    def __setattr__(self, name, value):
        raise AttributeError("ParamSet is immutable")

    @classmethod
    def from_arrays(cls, mapping: Mapping[str, object]) -> ParamSet:
        return cls((name, DenseTensor.from_array(a)) for name, a in mapping.items())

    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def items(self) -> Iterator[tuple[str, DenseTensor]]:
        return iter(self._entries.items())

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        """(name, shape) pairs in order; two sets with equal layout are mergeable."""
        return tuple((name, t.shape) for name, t in self._entries.items())

    def __getitem__(self, name: str) -> DenseTensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.names() == other.names() and all(
            self[n] == other[n] for n in self.names()
        )

    def __repr__(self) -> str:
        total = sum(t.size for t in self._entries.values())
        return f"ParamSet({len(self)} tensors, {total} values)"


def _require_same_shape(a: DenseTensor, b: DenseTensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")


def _require_finite(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("operation produced a non-finite value")
    return values


def ew_combine(a: DenseTensor, b: DenseTensor, kind: str) -> DenseTensor:
    """Elementwise ``a + b`` or ``a - b``; shapes must match exactly."""
    _require_same_shape(a, b)
    if kind == "add":
        out = a.values + b.values
    elif kind == "sub":
        out = a.values - b.values
    else:
        raise ValueError(f"kind must be 'add' or 'sub', got {kind!r}")
    return DenseTensor(a.shape, _require_finite(out))


def scale(a: DenseTensor, c: float) -> DenseTensor:
    """Multiply every value by the finite scalar ``c``."""
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError(f"scale factor must be finite, got {c!r}")
    with np.errstate(over="ignore"):
        out = a.values * c
    return DenseTensor(a.shape, _require_finite(out))


def dot(a: DenseTensor, b: DenseTensor) -> float:
    """Sum of elementwise products over same-shaped tensors."""
    _require_same_shape(a, b)
    out = float(np.dot(a.values, b.values))
    if not math.isfinite(out):
        raise NonFiniteError("dot product overflowed")
    return out


def l2_norm(a: DenseTensor) -> float:
    """Euclidean norm; sqrt(dot(a, a))."""
    return math.sqrt(dot(a, a))
