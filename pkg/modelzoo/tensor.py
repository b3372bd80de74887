from __future__ import annotations

import math
import struct
from collections.abc import Iterator, Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array

_EXTENT = struct.Struct("<Q")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinite value would be stored or propagated."""

    def __init__(self, message: str, node: int | None = None) -> None:
        super().__init__(message)
        self.node = node


class Tensor:
    """Dense, immutable, 64-bit float array with shape metadata.
    ---

    Values are stored in row-major order and are guaranteed finite. The
    underlying array is read-only, so tensors can be shared freely between
    concurrent evaluations.
    """

    __slots__ = ("_data",)

    def __init__(self, values: ArrayLike, shape: Sequence[int] | None = None) -> None:
        data = np.array(values, dtype=np.float64)
        if shape is not None:
            extents = tuple(int(extent) for extent in shape)
            if any(extent <= 0 for extent in extents):
                raise ValueError(f"Tensor extents must be positive, got {extents}")
            if math.prod(extents) != data.size:
                raise ValueError(
                    f"Shape {extents} holds {math.prod(extents)} values, "
                    f"but {data.size} were given"
                )
            data = data.reshape(extents)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("Tensor values must be finite")
        data.flags.writeable = False
        self._data = data

    @classmethod
    def _wrap(cls, data: Array) -> Tensor:
        tensor = cls.__new__(cls)
        view = np.asarray(data, dtype=np.float64).view()
        view.flags.writeable = False
        tensor._data = view
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self._data.shape)

    @property
    def values(self) -> Array:
        """Flat row-major view of the values."""
        return self._data.reshape(-1)

    @property
    def array(self) -> Array:
        return self._data

    @property
    def size(self) -> int:
        return int(self._data.size)

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError(f"Tensor of shape {self.shape} is not a scalar")
        return float(self._data.reshape(-1)[0])

    def __array__(self, dtype: Any = None, copy: bool | None = None) -> Array:
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self) -> int:
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, values={self.values.tolist()!r})"

    def to_bytes(self) -> bytes:
        """Encode as extent count, extents, then values, all little-endian 8-byte."""
        header = _EXTENT.pack(self._data.ndim) + b"".join(
            _EXTENT.pack(extent) for extent in self._data.shape
        )
        return header + self._data.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> Tensor:
        tensor, offset = read_tensor(data, 0)
        if offset != len(data):
            raise ValueError(f"{len(data) - offset} trailing bytes after tensor")
        return tensor


def read_tensor(data: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at `offset`. Returns the tensor and the next offset."""
    try:
        (ndim,) = _EXTENT.unpack_from(data, offset)
        offset += _EXTENT.size
        extents = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += _EXTENT.size * ndim
        count = math.prod(extents)
        end = offset + 8 * count
        if end > len(data):
            raise ValueError("Tensor payload is truncated")
        values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    except struct.error as e:
        raise ValueError(f"Tensor header is truncated: {e}") from e
    return Tensor(values.astype(np.float64), extents), end


def iter_tensors(data: bytes) -> Iterator[Tensor]:
    offset = 0
    while offset < len(data):
        tensor, offset = read_tensor(data, offset)
        yield tensor
