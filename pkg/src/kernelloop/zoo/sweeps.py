from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from kernelloop.core import KernelType, WorkloadShape, check_shape
from kernelloop.errors import ParseError


@dataclass(frozen=True)
class SweepEntry:
    name: str
    shape: WorkloadShape
    purpose: str


@lru_cache(maxsize=None)
def _load() -> dict[KernelType, tuple[SweepEntry, ...]]:
    text = resources.files("kernelloop.data").joinpath("sweeps.tsv").read_text()
    table: dict[KernelType, list[SweepEntry]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError("sweep rows need 4 tab-separated columns", "sweeps.tsv", lineno)
        kt = KernelType.parse(cols[0])
        shape = WorkloadShape.parse(cols[2])
        check_shape(kt, shape)
        entries = table.setdefault(kt, [])
        if any(e.name == cols[1] for e in entries):
            raise ParseError(f"duplicate sweep name {cols[1]!r}", "sweeps.tsv", lineno)
        entries.append(SweepEntry(cols[1], shape, cols[3]))
    return {k: tuple(v) for k, v in table.items()}


def shape_sweep(kernel_type: KernelType) -> list[SweepEntry]:
    """The checked-in sweep table for a kernel type, at its original (GPU-scale) sizes."""
    return list(_load().get(KernelType(kernel_type), ()))


def desk_shape(shape: WorkloadShape, divisor: int = 8, floor: int = 16) -> WorkloadShape:
    """Shrink a sweep shape for CPU execution: each dimension is divided by
    ``divisor`` but never pushed below ``min(d, floor)``. divisor=1 is the identity."""
    if divisor <= 1:
        return shape
    return WorkloadShape.from_pairs((k, max(min(v, floor), v // divisor)) for k, v in shape.items)


SMOKE_SHAPES = {
    KernelType.MATMUL: WorkloadShape.of(M=128, N=128, K=128),
    KernelType.SOFTMAX: WorkloadShape.of(M=128, N=128),
    KernelType.LAYERNORM: WorkloadShape.of(M=128, N=128),
    KernelType.RMSNORM: WorkloadShape.of(M=128, N=128),
    KernelType.REDUCE: WorkloadShape.of(M=128, N=128),
    KernelType.CROSS_ENTROPY: WorkloadShape.of(M=128, V=128),
    KernelType.ROTARY_EMB: WorkloadShape.of(B=1, H=1, S=128, D=128),
    KernelType.FLASH_ATTN: WorkloadShape.of(B=1, H=1, S=128, D=64),
    KernelType.FUSED_MLP: WorkloadShape.of(M=128, D=128, F=512),
}

#: dimensions that kernels tile or mask over; each is replaced in turn by the edge sizes
EDGE_DIMS = {
    KernelType.MATMUL: ("M", "N", "K"),
    KernelType.SOFTMAX: ("N",),
    KernelType.LAYERNORM: ("N",),
    KernelType.RMSNORM: ("N",),
    KernelType.REDUCE: ("N",),
    KernelType.CROSS_ENTROPY: ("V",),
    KernelType.ROTARY_EMB: ("S",),
    KernelType.FLASH_ATTN: ("S",),
    KernelType.FUSED_MLP: ("M",),
}

EDGE_SIZES = (1023, 4097, 1537)
