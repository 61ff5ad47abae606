"""Dense (n, c, h, w) tensors, elementwise arithmetic and the FSNT binary format.

Every operator in the package works on plain numpy arrays in (n, c, h, w)
row-major layout. :class:`Tensor4` is the checked container used where the
shape contract matters (serialization, elementwise ops with explicit
backward passes).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"FSNT"
# magic, precision (bytes per element), 3 reserved bytes, 4 x uint32 dims
HEADER = struct.Struct("<4sB3x4I")

_DTYPES = {4: np.float32, 8: np.float64}


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operator's contract."""


def as_dtype(precision) -> np.dtype:
    """Map 32/64 (bits), 4/8 (bytes), or a numpy dtype to float32/float64."""
    if precision in (32, 4, "float32", np.float32):
        return np.dtype(np.float32)
    if precision in (64, 8, "float64", np.float64):
        return np.dtype(np.float64)
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {precision!r}; use 32 or 64")
    return dt


@dataclass
class Tensor4:
    data: np.ndarray
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims (n, c, h, w), got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = np.ascontiguousarray(data)
        if self.grad is not None:
            grad = np.asarray(self.grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"grad shape {grad.shape} != data shape {self.data.shape}")
            self.grad = grad

    @classmethod
    def zeros(cls, shape, precision=64) -> "Tensor4":
        return cls(np.zeros(shape, dtype=as_dtype(precision)))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g


def _check_same(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def elementwise_add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same(a, b, "elementwise_add")
    return Tensor4(a.data + b.data)


def elementwise_add_backward(dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dout, dout


def elementwise_mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same(a, b, "elementwise_mul")
    return Tensor4(a.data * b.data)


def elementwise_mul_backward(dout: np.ndarray, a: Tensor4, b: Tensor4) -> tuple[np.ndarray, np.ndarray]:
    return dout * b.data, dout * a.data


# --- serialization -------------------------------------------------------

def _dims4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ShapeError(f"cannot serialize {len(shape)}-d array")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def write_tensor(fh: BinaryIO, array: np.ndarray) -> int:
    """Write one array (up to 4-d, left-padded with 1s); return bytes written."""
    arr = np.asarray(array)
    dt = as_dtype(arr.dtype if arr.dtype in (np.float32, np.float64) else 64)
    dims = _dims4(arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
    fh.write(HEADER.pack(MAGIC, dt.itemsize, *dims))
    fh.write(payload)
    return HEADER.size + len(payload)


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one tensor; always returns a 4-d array."""
    head = fh.read(HEADER.size)
    if len(head) != HEADER.size:
        raise EOFError("truncated FSNT header")
    magic, precision, *dims = HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if precision not in _DTYPES:
        raise ValueError(f"bad precision byte {precision}")
    dt = np.dtype(_DTYPES[precision]).newbyteorder("<")
    count = int(np.prod(dims))
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise EOFError("truncated FSNT payload")
    return np.frombuffer(raw, dtype=dt).astype(_DTYPES[precision]).reshape(dims)


def save_tensors(path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            peek = fh.peek(1) if hasattr(fh, "peek") else b"x"
            if not peek:
                break
            out.append(read_tensor(fh))
    return out
