"""Shared value types, workload arithmetic, tolerance policy and roofline math."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import ml_dtypes
import numpy as np

from kernelloop.errors import DomainError, MeasurementError, ParseError, ShapeError


class DType(str, enum.Enum):
    FP16 = "fp16"
    BF16 = "bf16"
    FP32 = "fp32"
    FP64 = "fp64"

    @property
    def size_bytes(self) -> int:
        return _DTYPE_SIZES[self]

    @property
    def storage(self) -> np.dtype:
        """numpy dtype holding the bit-exact stored values."""
        return _DTYPE_STORAGE[self]

    @property
    def is_half(self) -> bool:
        return self in (DType.FP16, DType.BF16)

    @classmethod
    def parse(cls, text: str) -> "DType":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise DomainError(f"unknown dtype {text!r}") from None


_DTYPE_SIZES = {DType.FP16: 2, DType.BF16: 2, DType.FP32: 4, DType.FP64: 8}
_DTYPE_STORAGE = {
    DType.FP16: np.dtype(np.float16),
    DType.BF16: np.dtype(ml_dtypes.bfloat16),
    DType.FP32: np.dtype(np.float32),
    DType.FP64: np.dtype(np.float64),
}

#: dtypes swept by the shape-sweep stage
SWEEP_DTYPES = (DType.FP16, DType.BF16, DType.FP32)


@dataclass(frozen=True)
class Tolerance:
    atol: float
    rtol: float

    def __post_init__(self):
        if not self.atol > 0 or self.rtol < 0:
            raise DomainError(f"invalid tolerance atol={self.atol} rtol={self.rtol}")


# atol per dtype; rtol is atol/10 (comparison: |a-b| <= atol + rtol*|b|)
_ATOL = {DType.FP16: 1e-2, DType.BF16: 2e-2, DType.FP32: 1e-4, DType.FP64: 1e-8}


def tolerance_for(dtype: DType) -> Tolerance:
    atol = _ATOL[DType(dtype)]
    return Tolerance(atol=atol, rtol=atol / 10)


class Regime(str, enum.Enum):
    COMPUTE = "compute"
    MEMORY = "memory"


class Metric(str, enum.Enum):
    TFLOPS = "tflops"
    GBPS = "gbps"


class KernelType(str, enum.Enum):
    MATMUL = "matmul"
    FLASH_ATTN = "flash_attn"
    FUSED_MLP = "fused_mlp"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    RMSNORM = "rmsnorm"
    CROSS_ENTROPY = "cross_entropy"
    ROTARY_EMB = "rotary_emb"
    REDUCE = "reduce"

    @property
    def regime(self) -> Regime:
        if self in _COMPUTE_TYPES:
            return Regime.COMPUTE
        return Regime.MEMORY

    @property
    def metric(self) -> Metric:
        return Metric.TFLOPS if self.regime is Regime.COMPUTE else Metric.GBPS

    @property
    def dims(self) -> tuple[str, ...]:
        return _DIMS[self]

    @property
    def leading_dim(self) -> str:
        """Batch-like dimension scaled for the half/double workload variants."""
        return _LEADING[self]

    @classmethod
    def parse(cls, text: str) -> "KernelType":
        key = text.strip().lower()
        key = {"rotary": "rotary_emb", "cross_ent": "cross_entropy"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise DomainError(f"unknown kernel type {text!r}") from None


_COMPUTE_TYPES = {KernelType.MATMUL, KernelType.FLASH_ATTN, KernelType.FUSED_MLP}

_DIMS = {
    KernelType.MATMUL: ("M", "N", "K"),
    KernelType.FLASH_ATTN: ("B", "H", "S", "D"),
    KernelType.FUSED_MLP: ("M", "D", "F"),
    KernelType.SOFTMAX: ("M", "N"),
    KernelType.LAYERNORM: ("M", "N"),
    KernelType.RMSNORM: ("M", "N"),
    KernelType.CROSS_ENTROPY: ("M", "V"),
    KernelType.ROTARY_EMB: ("B", "H", "S", "D"),
    KernelType.REDUCE: ("M", "N"),
}

_LEADING = {
    KernelType.MATMUL: "M",
    KernelType.FLASH_ATTN: "S",
    KernelType.FUSED_MLP: "M",
    KernelType.SOFTMAX: "M",
    KernelType.LAYERNORM: "M",
    KernelType.RMSNORM: "M",
    KernelType.CROSS_ENTROPY: "M",
    KernelType.ROTARY_EMB: "S",
    KernelType.REDUCE: "M",
}


@dataclass(frozen=True)
class WorkloadShape:
    """Named integer dimensions, kept in declaration order."""

    items: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [k for k, _ in self.items]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate dimension names in {names}")
        for k, v in self.items:
            if int(v) != v or v < 1:
                raise ShapeError(f"dimension {k}={v} must be an integer >= 1")

    @classmethod
    def of(cls, **dims: int) -> "WorkloadShape":
        return cls(tuple((k, int(v)) for k, v in dims.items()))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> "WorkloadShape":
        return cls(tuple((k, int(v)) for k, v in pairs))

    @classmethod
    def parse(cls, text: str) -> "WorkloadShape":
        pairs = []
        for part in text.strip().split(","):
            if "=" not in part:
                raise ShapeError(f"bad shape component {part!r} in {text!r}")
            k, v = part.split("=", 1)
            try:
                pairs.append((k.strip(), int(v)))
            except ValueError:
                raise ShapeError(f"bad shape value {v!r} in {text!r}") from None
        return cls.from_pairs(pairs)

    def __getitem__(self, name: str) -> int:
        for k, v in self.items:
            if k == name:
                return v
        raise ShapeError(f"shape {self} has no dimension {name!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.items)

    def as_dict(self) -> dict[str, int]:
        return dict(self.items)

    def replace(self, **dims: int) -> "WorkloadShape":
        for k in dims:
            self[k]
        return WorkloadShape(tuple((k, int(dims.get(k, v))) for k, v in self.items))

    def numel(self) -> int:
        return math.prod(v for _, v in self.items)

    def __str__(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.items)

    def tag(self) -> str:
        return "x".join(str(v) for _, v in self.items)


def check_shape(kernel_type: KernelType, shape: WorkloadShape) -> None:
    if shape.names != KernelType(kernel_type).dims:
        raise ShapeError(
            f"{kernel_type.value} expects dimensions {kernel_type.dims}, got {shape.names}"
        )


def scale_leading(kernel_type: KernelType, shape: WorkloadShape, factor: float) -> WorkloadShape:
    name = kernel_type.leading_dim
    return shape.replace(**{name: max(1, math.ceil(shape[name] * factor))})


# FLOPs per element for row-wise ops; only the memory-bound classification depends on these
ROW_FLOP_CONSTANTS = {
    KernelType.SOFTMAX: 5,
    KernelType.LAYERNORM: 8,
    KernelType.RMSNORM: 4,
    KernelType.REDUCE: 1,
}


def flops_of(kernel_type: KernelType, shape: WorkloadShape) -> int:
    kernel_type = KernelType(kernel_type)
    check_shape(kernel_type, shape)
    d = shape.as_dict()
    if kernel_type is KernelType.MATMUL:
        return 2 * d["M"] * d["N"] * d["K"]
    if kernel_type in ROW_FLOP_CONSTANTS:
        return ROW_FLOP_CONSTANTS[kernel_type] * d["M"] * d["N"]
    if kernel_type is KernelType.CROSS_ENTROPY:
        return 5 * d["M"] * d["V"]
    if kernel_type is KernelType.ROTARY_EMB:
        return 6 * d["B"] * d["H"] * d["S"] * d["D"]
    if kernel_type is KernelType.FLASH_ATTN:
        # QK^T and PV products
        return 4 * d["B"] * d["H"] * d["S"] * d["S"] * d["D"]
    if kernel_type is KernelType.FUSED_MLP:
        # gate, up and down projections
        return 6 * d["M"] * d["D"] * d["F"]
    raise ShapeError(f"no FLOP formula for {kernel_type}")


def bytes_of(kernel_type: KernelType, shape: WorkloadShape, dtype: DType) -> int:
    kernel_type = KernelType(kernel_type)
    check_shape(kernel_type, shape)
    size = DType(dtype).size_bytes
    d = shape.as_dict()
    if kernel_type is KernelType.MATMUL:
        return (d["M"] * d["K"] + d["K"] * d["N"] + d["M"] * d["N"]) * size
    if kernel_type in (KernelType.SOFTMAX, KernelType.LAYERNORM, KernelType.RMSNORM):
        return 2 * d["M"] * d["N"] * size
    if kernel_type is KernelType.CROSS_ENTROPY:
        return d["M"] * d["V"] * size
    if kernel_type is KernelType.REDUCE:
        return (d["M"] * d["N"] + d["M"]) * size
    if kernel_type is KernelType.ROTARY_EMB:
        return 2 * d["B"] * d["H"] * d["S"] * d["D"] * size
    if kernel_type is KernelType.FLASH_ATTN:
        return 4 * d["B"] * d["H"] * d["S"] * d["D"] * size
    if kernel_type is KernelType.FUSED_MLP:
        return (2 * d["M"] * d["D"] + 3 * d["D"] * d["F"]) * size
    raise ShapeError(f"no bytes formula for {kernel_type}")


def work_of(kernel_type: KernelType, shape: WorkloadShape, dtype: DType) -> int:
    """Numerator of the kernel's throughput metric: FLOPs or bytes."""
    if KernelType(kernel_type).metric is Metric.TFLOPS:
        return flops_of(kernel_type, shape)
    return bytes_of(kernel_type, shape, dtype)


@dataclass(frozen=True)
class KernelSpec:
    name: str
    kernel_type: KernelType
    primary_shape: WorkloadShape
    dtype: DType
    half_shape: WorkloadShape | None = None
    double_shape: WorkloadShape | None = None
    tolerance: Tolerance | None = None

    def __post_init__(self):
        kt = KernelType(self.kernel_type)
        object.__setattr__(self, "kernel_type", kt)
        object.__setattr__(self, "dtype", DType(self.dtype))
        check_shape(kt, self.primary_shape)
        if self.half_shape is None:
            object.__setattr__(self, "half_shape", scale_leading(kt, self.primary_shape, 0.5))
        if self.double_shape is None:
            object.__setattr__(self, "double_shape", scale_leading(kt, self.primary_shape, 2))
        if self.tolerance is None:
            object.__setattr__(self, "tolerance", tolerance_for(self.dtype))

    @classmethod
    def make(cls, kernel_type, shape: WorkloadShape | Mapping[str, int], dtype="fp32", name=None):
        kt = KernelType.parse(kernel_type) if isinstance(kernel_type, str) else kernel_type
        if not isinstance(shape, WorkloadShape):
            shape = WorkloadShape.of(**shape)
        dt = DType.parse(dtype) if isinstance(dtype, str) else dtype
        return cls(name=name or f"{kt.value}_{shape.tag()}_{dt.value}", kernel_type=kt,
                   primary_shape=shape, dtype=dt)

    @property
    def flops(self) -> int:
        return flops_of(self.kernel_type, self.primary_shape)

    @property
    def bytes(self) -> int:
        return bytes_of(self.kernel_type, self.primary_shape, self.dtype)


class HardwareSource(str, enum.Enum):
    STATIC_DB = "static_db"
    CALIBRATED = "calibrated"


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_flops: float
    peak_bandwidth: float
    source: HardwareSource = HardwareSource.STATIC_DB

    def __post_init__(self):
        if not (self.peak_flops > 0 and self.peak_bandwidth > 0):
            raise DomainError(f"hardware {self.name}: peaks must be positive")
        if not (math.isfinite(self.peak_flops) and math.isfinite(self.peak_bandwidth)):
            raise DomainError(f"hardware {self.name}: peaks must be finite")
        object.__setattr__(self, "source", HardwareSource(self.source))

    @property
    def ridge_point(self) -> float:
        return self.peak_flops / self.peak_bandwidth


@dataclass(frozen=True)
class RooflineStatus:
    arithmetic_intensity: float
    bound: Regime
    pct_of_peak: float

    def summary(self) -> str:
        return (f"ai={self.arithmetic_intensity:.4g} bound={self.bound.value} "
                f"pct_of_peak={self.pct_of_peak:.4f}")


def roofline(flops: float, nbytes: float, elapsed_seconds: float, hw: HardwareSpec) -> RooflineStatus:
    if not elapsed_seconds > 0 or not math.isfinite(elapsed_seconds):
        raise MeasurementError(f"elapsed time must be positive and finite, got {elapsed_seconds}")
    if not (flops > 0 and nbytes > 0):
        raise DomainError("flops and bytes must be positive")
    ai = flops / nbytes
    # exact tie at the ridge point counts as compute-bound
    if ai >= hw.ridge_point:
        return RooflineStatus(ai, Regime.COMPUTE, (flops / elapsed_seconds) / hw.peak_flops)
    return RooflineStatus(ai, Regime.MEMORY, (nbytes / elapsed_seconds) / hw.peak_bandwidth)


def parse_key_values(text: str, path=None) -> dict[str, str]:
    """Parse a flat ``key=value`` document; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", path, lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        out[key] = value.strip()
    return out
