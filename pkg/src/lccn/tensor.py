"""Dense float32 tensors with a fixed memory layout.

Feature maps are rank-3 arrays indexed ``(x, y, c)`` with the channel as the
fastest-varying axis, so the flat offset of ``(x, y, c)`` is
``(x * Y + y) * C + c``.  Convolution weights are rank-4 arrays indexed
``(t, i, j, c)``: filter, kernel row, kernel column, input channel.  Keeping
the channel innermost means one receptive-field patch is a contiguous gather,
which is what the matrix formulation of convolution relies on.

Tensors are immutable after construction and every operation here is a pure
function, so values can be shared freely across threads.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


class Shape(tuple):
    """Tuple of positive integer extents."""

    def __new__(cls, dims) -> "Shape":
        dims = tuple(int(d) for d in dims)
        if not dims:
            raise ShapeError("shape must have at least one extent")
        for d in dims:
            if d < 1:
                raise ShapeError(f"extents must be >= 1, got {dims}")
        return super().__new__(cls, dims)

    @property
    def elements(self) -> int:
        n = 1
        for d in self:
            n *= d
        return n


class Tensor:
    """Immutable C-contiguous float32 array with a validated shape.

    Construction copies the input values by default, checks them for
    NaN/Inf, and freezes the buffer.  ``require_finite=False`` is meant for
    instrumentation (e.g. poisoned-read tests) only.
    """

    __slots__ = ("array",)

    def __init__(self, values, require_finite: bool = True):
        arr = np.array(values, dtype=DTYPE, order="C", copy=True)
        Shape(arr.shape)
        if require_finite and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array the caller owns without copying."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        arr.flags.writeable = False
        object.__setattr__(t, "array", arr)
        return t

    @property
    def shape(self) -> Shape:
        return Shape(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat, read-only view of the backing buffer."""
        return self.array.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.array.shape)})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.array.shape == other.array.shape
            and bool(np.array_equal(self.array, other.array))
        )

    def __hash__(self):
        raise TypeError("Tensor is not hashable")


def _as_array(a) -> np.ndarray:
    return a.array if isinstance(a, Tensor) else np.asarray(a)


def zeros(shape) -> Tensor:
    """All-zero tensor of the given shape."""
    return Tensor._wrap(np.zeros(Shape(shape), dtype=DTYPE))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of two tensors of identical shape."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"hadamard shape mismatch: {av.shape} vs {bv.shape}")
    return Tensor._wrap(av * bv)


def relu(a: Tensor) -> Tensor:
    """Element-wise max(x, 0)."""
    return Tensor._wrap(np.maximum(_as_array(a), 0))


def sparsity(a) -> float:
    """Fraction of exact-zero elements.

    Zero here means exactly 0.0: the rectifier produces exact zeros and the
    skip machinery keys on them, so no epsilon is involved.
    """
    av = _as_array(a)
    return float(np.count_nonzero(av == 0) / av.size)
