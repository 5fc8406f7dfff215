"""fp64 reference oracles. Outputs are rounded once to the request dtype."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from kernelloop.core import KernelType, WorkloadShape
from kernelloop.errors import ContractError
from kernelloop.zoo.buffers import TensorBuffer

EPS = 1e-5


def _arity(kernel_type: KernelType) -> int:
    return {
        KernelType.MATMUL: 2,
        KernelType.SOFTMAX: 1,
        KernelType.LAYERNORM: 3,
        KernelType.RMSNORM: 2,
        KernelType.CROSS_ENTROPY: 2,
        KernelType.ROTARY_EMB: 3,
        KernelType.REDUCE: 1,
        KernelType.FLASH_ATTN: 3,
        KernelType.FUSED_MLP: 4,
    }[kernel_type]


def infer_shape(kernel_type: KernelType, inputs: Sequence[TensorBuffer]) -> WorkloadShape:
    """Check the inputs against the kernel's arity/shape contract and return the workload shape."""
    kt = KernelType(kernel_type)
    if len(inputs) != _arity(kt):
        raise ContractError(f"{kt.value} takes {_arity(kt)} inputs, got {len(inputs)}")
    shapes = [tuple(b.shape) for b in inputs]

    def need(cond, what):
        if not cond:
            raise ContractError(f"{kt.value}: {what} (got shapes {shapes})")

    if kt is KernelType.MATMUL:
        need(len(shapes[0]) == 2 and len(shapes[1]) == 2 and shapes[0][1] == shapes[1][0],
             "expects (M,K) @ (K,N)")
        return WorkloadShape.of(M=shapes[0][0], N=shapes[1][1], K=shapes[0][1])
    if kt in (KernelType.SOFTMAX, KernelType.REDUCE):
        need(len(shapes[0]) == 2, "expects a 2-d input")
        return WorkloadShape.of(M=shapes[0][0], N=shapes[0][1])
    if kt in (KernelType.LAYERNORM, KernelType.RMSNORM):
        need(len(shapes[0]) == 2, "expects a 2-d input")
        n = shapes[0][1]
        need(all(s == (n,) for s in shapes[1:]), "parameter vectors must have length N")
        return WorkloadShape.of(M=shapes[0][0], N=n)
    if kt is KernelType.CROSS_ENTROPY:
        need(len(shapes[0]) == 2 and shapes[1] == (shapes[0][0],), "expects logits (M,V), targets (M,)")
        need(inputs[1].dtype is None, "targets must be integer indices")
        return WorkloadShape.of(M=shapes[0][0], V=shapes[0][1])
    if kt is KernelType.ROTARY_EMB:
        need(len(shapes[0]) == 4 and shapes[0][3] % 2 == 0, "expects x (B,H,S,D) with even D")
        b, h, s, d = shapes[0]
        need(shapes[1] == (s, d // 2) and shapes[2] == (s, d // 2), "cos/sin must be (S, D/2)")
        return WorkloadShape.of(B=b, H=h, S=s, D=d)
    if kt is KernelType.FLASH_ATTN:
        need(len(shapes[0]) == 4 and shapes[0] == shapes[1] == shapes[2], "q, k, v must share (B,H,S,D)")
        b, h, s, d = shapes[0]
        return WorkloadShape.of(B=b, H=h, S=s, D=d)
    if kt is KernelType.FUSED_MLP:
        m, d = shapes[0]
        need(len(shapes[1]) == 2 and shapes[1][0] == d, "w_gate must be (D,F)")
        f = shapes[1][1]
        need(shapes[2] == (d, f) and shapes[3] == (f, d), "w_up (D,F) and w_down (F,D) required")
        return WorkloadShape.of(M=m, D=d, F=f)
    raise ContractError(f"unsupported kernel type {kt}")


def _f64(buf: TensorBuffer) -> np.ndarray:
    return buf.data.astype(np.float64)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reference_execute(kernel_type: KernelType, inputs: Sequence[TensorBuffer]) -> TensorBuffer:
    kt = KernelType(kernel_type)
    infer_shape(kt, inputs)
    dtype = inputs[0].dtype
    if kt is KernelType.MATMUL:
        out = _f64(inputs[0]) @ _f64(inputs[1])
    elif kt is KernelType.SOFTMAX:
        out = softmax_rows(_f64(inputs[0]))
    elif kt is KernelType.LAYERNORM:
        x = _f64(inputs[0])
        mean = x.mean(axis=1, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
        out = (x - mean) / np.sqrt(var + EPS) * _f64(inputs[1]) + _f64(inputs[2])
    elif kt is KernelType.RMSNORM:
        x = _f64(inputs[0])
        out = x / np.sqrt((x * x).mean(axis=1, keepdims=True) + EPS) * _f64(inputs[1])
    elif kt is KernelType.CROSS_ENTROPY:
        x = _f64(inputs[0])
        t = inputs[1].data
        m = x.max(axis=1)
        lse = np.log(np.exp(x - m[:, None]).sum(axis=1)) + m
        out = lse - x[np.arange(x.shape[0]), t]
    elif kt is KernelType.ROTARY_EMB:
        x = _f64(inputs[0])
        c, s = _f64(inputs[1]), _f64(inputs[2])
        x0, x1 = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = x0 * c - x1 * s
        out[..., 1::2] = x0 * s + x1 * c
    elif kt is KernelType.REDUCE:
        out = _f64(inputs[0]).sum(axis=1)
    elif kt is KernelType.FLASH_ATTN:
        q, k, v = (_f64(b) for b in inputs)
        scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
        s = q.shape[2]
        scores = np.where(np.tril(np.ones((s, s), dtype=bool)), scores, -np.inf)
        out = softmax_rows(scores) @ v
    elif kt is KernelType.FUSED_MLP:
        x, wg, wu, wd = (_f64(b) for b in inputs)
        g = x @ wg
        out = (g / (1.0 + np.exp(-g)) * (x @ wu)) @ wd
    else:
        raise ContractError(f"no reference for {kt}")
    return TensorBuffer.from_array(out, dtype)
