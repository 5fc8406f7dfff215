from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kernelloop.core import DType, Tolerance
from kernelloop.errors import ContractError


@dataclass(frozen=True, eq=False)
class TensorBuffer:
    """Immutable row-major tensor.

    ``dtype`` is None for integer index tensors (cross-entropy targets). Half
    formats hold their exact stored bit patterns (numpy float16 / ml_dtypes
    bfloat16), so every store is a rounding step.
    """

    shape: tuple[int, ...]
    dtype: DType | None
    data: np.ndarray

    def __post_init__(self):
        if self.data.size != math.prod(self.shape):
            raise ContractError(f"buffer has {self.data.size} elements, shape {self.shape}")
        want = np.dtype(np.int64) if self.dtype is None else self.dtype.storage
        if self.data.dtype != want:
            raise ContractError(f"buffer storage {self.data.dtype} does not match {self.dtype}")
        data = np.ascontiguousarray(self.data).reshape(self.shape)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, values, dtype: DType | None) -> "TensorBuffer":
        arr = np.asarray(values)
        if dtype is None:
            return cls(arr.shape, None, arr.astype(np.int64))
        return cls(arr.shape, dtype, arr.astype(dtype.storage))

    def astype(self, np_dtype) -> np.ndarray:
        return self.data.astype(np_dtype)

    def bits(self) -> bytes:
        """Raw storage bytes, for bitwise comparisons."""
        return self.data.tobytes()

    def __repr__(self) -> str:
        name = self.dtype.value if self.dtype else "int64"
        return f"TensorBuffer(shape={self.shape}, dtype={name})"


@dataclass(frozen=True)
class Comparison:
    ok: bool
    max_abs_error: float
    kind: str  # "ok", "shape", "nonfinite", "tolerance"


def compare(out: TensorBuffer, ref: TensorBuffer, tol: Tolerance) -> Comparison:
    """Element-wise check |out - ref| <= atol + rtol * |ref|; non-finite outputs always fail."""
    if tuple(out.shape) != tuple(ref.shape):
        return Comparison(False, math.inf, "shape")
    a = out.data.astype(np.float64)
    b = ref.data.astype(np.float64)
    if not np.all(np.isfinite(a)):
        return Comparison(False, math.inf, "nonfinite")
    if a.size == 0:
        return Comparison(True, 0.0, "ok")
    err = np.abs(a - b)
    max_err = float(np.max(err))
    if not np.all(np.isfinite(b)):
        return Comparison(False, math.inf, "nonfinite")
    if np.all(err <= tol.atol + tol.rtol * np.abs(b)):
        return Comparison(True, max_err, "ok")
    return Comparison(False, max_err, "tolerance")
