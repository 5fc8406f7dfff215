"""Deterministic input generators: ordinary random workloads, adversarial sets, determinism probes.

Random workloads are scaled so every output stays below magnitude 4. Past
that, one bf16 ulp exceeds bf16's atol + rtol*|x|, and an fp32-computed
candidate and the fp64 reference could disagree by a single rounding step.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from kernelloop.core import DType, KernelType, WorkloadShape, check_shape
from kernelloop.zoo.buffers import TensorBuffer

Inputs = tuple[TensorBuffer, ...]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(repr(key).encode()))


def _buf(values, dtype):
    return TensorBuffer.from_array(values, dtype)


def _rotary_tables(s: int, d: int, dtype: DType, offset: int = 0):
    inv_freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    angles = (np.arange(s)[:, None] + offset) * inv_freq[None, :]
    return _buf(np.cos(angles), dtype), _buf(np.sin(angles), dtype)


def make_inputs(kernel_type: KernelType, shape: WorkloadShape, dtype: DType, seed: int = 0) -> Inputs:
    kt = KernelType(kernel_type)
    check_shape(kt, shape)
    dtype = DType(dtype)
    rng = _rng("inputs", kt.value, str(shape), dtype.value, seed)
    d = shape.as_dict()
    if kt is KernelType.MATMUL:
        # output std 0.25
        s = (9.0 / (16.0 * d["K"])) ** 0.25
        return (_buf(rng.uniform(-s, s, (d["M"], d["K"])), dtype),
                _buf(rng.uniform(-s, s, (d["K"], d["N"])), dtype))
    if kt is KernelType.SOFTMAX:
        return (_buf(rng.standard_normal((d["M"], d["N"])), dtype),)
    if kt is KernelType.LAYERNORM:
        n = d["N"]
        return (_buf(0.5 + rng.standard_normal((d["M"], n)), dtype),
                _buf(0.5 + 0.05 * rng.standard_normal(n), dtype),
                _buf(0.1 * rng.standard_normal(n), dtype))
    if kt is KernelType.RMSNORM:
        n = d["N"]
        return (_buf(rng.standard_normal((d["M"], n)), dtype),
                _buf(0.5 + 0.05 * rng.standard_normal(n), dtype))
    if kt is KernelType.CROSS_ENTROPY:
        m, v = d["M"], d["V"]
        logits = rng.standard_normal((m, v))
        targets = rng.integers(0, v, m)
        # a plausible trained-model margin keeps the loss near 0.5
        logits[np.arange(m), targets] = math.log(v) + 1.0 + 0.1 * rng.standard_normal(m)
        return _buf(logits, dtype), TensorBuffer.from_array(targets, None)
    if kt is KernelType.ROTARY_EMB:
        x = 0.5 * rng.standard_normal((d["B"], d["H"], d["S"], d["D"]))
        return (_buf(x, dtype),) + _rotary_tables(d["S"], d["D"], dtype)
    if kt is KernelType.REDUCE:
        return (_buf(rng.standard_normal((d["M"], d["N"])) / math.sqrt(d["N"]), dtype),)
    if kt is KernelType.FLASH_ATTN:
        dims = (d["B"], d["H"], d["S"], d["D"])
        return tuple(_buf(0.5 * rng.standard_normal(dims), dtype) for _ in range(3))
    if kt is KernelType.FUSED_MLP:
        m, h, f = d["M"], d["D"], d["F"]
        return (_buf(rng.standard_normal((m, h)), dtype),
                _buf(rng.standard_normal((h, f)) / math.sqrt(h), dtype),
                _buf(rng.standard_normal((h, f)) / math.sqrt(h), dtype),
                _buf(0.25 * rng.standard_normal((f, h)) / math.sqrt(f), dtype))
    raise ValueError(f"no input generator for {kt}")


# largest magnitude whose rotation output bf16 can still compare at its published tolerance
_ROTARY_LARGE = {DType.FP16: 1e3, DType.BF16: 2.0, DType.FP32: 1e6, DType.FP64: 1e12}


def _alternating(shape2d, magnitude):
    m, n = shape2d
    signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return np.broadcast_to(signs * magnitude, (m, n)).copy()


def adversarial_inputs(kernel_type: KernelType, shape: WorkloadShape, dtype: DType) -> dict[str, Inputs]:
    """Named input sets probing overflow, cancellation and degenerate statistics."""
    kt = KernelType(kernel_type)
    check_shape(kt, shape)
    dtype = DType(dtype)
    d = shape.as_dict()
    rng = _rng("adversarial", kt.value, str(shape), dtype.value)
    out: dict[str, Inputs] = {}
    if kt is KernelType.SOFTMAX:
        m, n = d["M"], d["N"]
        out["constant_large"] = (_buf(np.full((m, n), 3.0e4), dtype),)
        out["constant_moderate"] = (_buf(np.full((m, n), 10.0), dtype),)
        mixed = _alternating((m, n), 3.0e4)
        mixed[1::2] = -mixed[1::2]
        out["mixed_sign_large"] = (_buf(mixed, dtype),)
    elif kt is KernelType.MATMUL:
        m, n, k = d["M"], d["N"], d["K"]
        # terms span 1e4 * 1e-4 down to 1e-4 * 1e-4; output std stays near 0.25
        c = math.sqrt(3.0 / (8.0 * k))
        a = np.where(rng.random((m, k)) < 0.5, 1e4, 1e-4) * rng.choice([-1.0, 1.0], (m, k))
        b = 1e-4 * c * rng.uniform(-1.0, 1.0, (k, n))
        out["extreme_dynamic_range"] = (_buf(a, dtype), _buf(b, dtype))
    elif kt in (KernelType.LAYERNORM, KernelType.RMSNORM):
        m, n = d["M"], d["N"]
        consts = np.array([0.0, 3.0, -0.75, 100.0])
        x = np.broadcast_to(consts[np.arange(m) % 4][:, None], (m, n)).copy()
        rest = make_inputs(kt, shape, dtype)[1:]
        out["constant_rows"] = (_buf(x, dtype),) + rest
    elif kt is KernelType.CROSS_ENTROPY:
        m, v = d["M"], d["V"]
        logits = rng.standard_normal((m, v))
        targets = rng.integers(0, v, m)
        dom = logits.copy()
        dom[np.arange(m), targets] = 1000.0
        out["dominant_target"] = (_buf(dom, dtype), TensorBuffer.from_array(targets, None))
        if v > 1:
            other = (targets + 1) % v
            rival = logits.copy()
            rival[np.arange(m), other] = 1000.0
            rival[np.arange(m), targets] = 999.0
            out["dominant_rival"] = (_buf(rival, dtype), TensorBuffer.from_array(targets, None))
    elif kt is KernelType.ROTARY_EMB:
        b, h, s, dd = d["B"], d["H"], d["S"], d["D"]
        x = _alternating((b * h * s, dd), _ROTARY_LARGE[dtype]).reshape(b, h, s, dd)
        out["alternating_large"] = (_buf(x, dtype),) + _rotary_tables(s, dd, dtype)
        far = 0.5 * rng.standard_normal((b, h, s, dd))
        out["far_positions"] = (_buf(far, dtype),) + _rotary_tables(s, dd, dtype, offset=1 << 20)
    elif kt is KernelType.REDUCE:
        m, n = d["M"], d["N"]
        out["alternating_large"] = (_buf(_alternating((m, n), 3.0e4), dtype),)
        pattern = np.tile([3.0e4, 1.0, -3.0e4, 1.0], n // 4 + 1)[:n]
        out["alternating_with_ones"] = (_buf(np.broadcast_to(pattern, (m, n)).copy(), dtype),)
    else:
        out["random"] = make_inputs(kt, shape, dtype, seed=1)
    return out


# (L, e) with e below half an ulp of L at the compute precision. fp16 cannot hold
# 1e8, so its probe pairs the largest finite scale with a small e instead.
_CANCEL = {DType.FP16: (6.0e4, 1.0e-3), DType.BF16: (1.0e8, 1.0), DType.FP32: (1.0e8, 1.0),
           DType.FP64: (1.0e17, 1.0)}


def determinism_inputs(kernel_type: KernelType, shape: WorkloadShape, dtype: DType) -> Inputs:
    """Random inputs; for reductions the first rows carry the [L, e, -L, e] cancellation
    pattern, whose result depends on summation order."""
    kt = KernelType(kernel_type)
    dtype = DType(dtype)
    base = make_inputs(kt, shape, dtype, seed=2)
    if kt is not KernelType.REDUCE:
        return base
    x = base[0].data.astype(np.float64).copy()
    n = x.shape[1]
    big, small = _CANCEL[dtype]
    pattern = np.tile([big, small, -big, small], n // 4 + 1)[:n]
    x[: max(1, x.shape[0] // 2)] = pattern
    return (_buf(x, dtype),)
