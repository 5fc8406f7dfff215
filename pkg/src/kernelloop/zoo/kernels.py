"""Parameterized CPU kernel implementations.

Each kernel walks the problem in row blocks of ``tile_m`` rows and column
strips of ``tile_n * vector_width * unroll`` elements, so the tuning
parameters change the amount of per-block overhead the way tile and vector
sizes do on a GPU. Arithmetic happens in fp32 (fp64 when ``accum_precision``
is ``widened`` or the dtype is fp64) and the result is rounded to the storage
dtype once on the final store.

The functions named ``*_bug`` / ``broken`` / ``racy`` / ``naive`` (for
softmax and cross-entropy) are deliberately wrong fixtures used to check the
correctness harness.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from kernelloop.core import DType
from kernelloop.zoo.reference import EPS

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        if workers not in _pools:
            _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="kl-worker")
        return _pools[workers]


def compute_type(dtype: DType, accum: str = "same"):
    if accum == "widened" or dtype is DType.FP64:
        return np.float64
    return np.float32


def row_blocks(rows: int, tile_m: int, workers: int, fn) -> None:
    """Call ``fn(r0, r1)`` for every row block; blocks are split into contiguous
    groups when ``workers > 1`` so each output row is computed by exactly one worker."""
    blocks = [(r0, min(r0 + tile_m, rows)) for r0 in range(0, rows, tile_m)]
    if workers <= 1 or len(blocks) < 2:
        for r0, r1 in blocks:
            fn(r0, r1)
        return
    groups = [g for g in np.array_split(np.arange(len(blocks)), workers) if len(g)]

    def run(group):
        for i in group:
            fn(*blocks[i])

    for fut in [_pool(workers).submit(run, g) for g in groups]:
        fut.result()


def strips(n: int, width: int):
    for c0 in range(0, n, width):
        yield c0, min(c0 + width, n)


def strip_width(p: dict) -> int:
    return p["tile_n"] * p["vector_width"] * p["unroll"]


# ---------------------------------------------------------------- matmul

def matmul_naive(p, inputs, dtype):
    """Rank-``unroll`` updates over K: correct but deliberately slow."""
    ct = compute_type(dtype, p["accum_precision"])
    a = inputs[0].astype(ct)
    b = inputs[1].astype(ct)
    m, k = a.shape
    c = np.zeros((m, b.shape[1]), ct)
    step = p["unroll"]
    for k0 in range(0, k, step):
        c += a[:, k0:k0 + step] @ b[k0:k0 + step, :]
    return c


def _matmul_tiled(p, inputs, dtype, drop_last_row_tile=False):
    ct = compute_type(dtype, p["accum_precision"])
    a = inputs[0].astype(ct)
    b = inputs[1].astype(ct)
    m, k = a.shape
    n = b.shape[1]
    tm, tn, tk = p["tile_m"], p["tile_n"], p["tile_k"]
    c = np.zeros((m, n), ct)
    limit = m
    if drop_last_row_tile and m >= 4 * n:
        limit = max(0, m - tm)

    def block(r0, r1):
        if r0 >= limit:
            return
        for j0 in range(0, n, tn):
            j1 = min(j0 + tn, n)
            acc = np.zeros((r1 - r0, j1 - j0), ct)
            for k0 in range(0, k, tk):
                acc += a[r0:r1, k0:k0 + tk] @ b[k0:k0 + tk, j0:j1]
            c[r0:r1, j0:j1] = acc

    row_blocks(m, tm, p["worker_count"], block)
    return c


def matmul_tiled(p, inputs, dtype):
    return _matmul_tiled(p, inputs, dtype)


def matmul_tall_bug(p, inputs, dtype):
    # skips the last row tile on tall (M >= 4N) problems
    return _matmul_tiled(p, inputs, dtype, drop_last_row_tile=True)


# ---------------------------------------------------------------- softmax

def _softmax(p, inputs, dtype, mode):
    ct = compute_type(dtype, p["accum_precision"])
    x = inputs[0].astype(ct)
    m, n = x.shape
    out = np.empty((m, n), ct)
    width = strip_width(p)

    def block(r0, r1):
        rows = x[r0:r1]
        if mode == "naive":
            total = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(n, width):
                total += np.exp(rows[:, c0:c1]).sum(axis=1)
            for c0, c1 in strips(n, width):
                out[r0:r1, c0:c1] = np.exp(rows[:, c0:c1]) / total[:, None]
            return
        if mode == "online":
            mx = np.full(r1 - r0, -np.inf, ct)
            total = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(n, width):
                s = rows[:, c0:c1]
                new = np.maximum(mx, s.max(axis=1))
                total = total * np.exp(mx - new) + np.exp(s - new[:, None]).sum(axis=1)
                mx = new
        else:
            mx = np.full(r1 - r0, -np.inf, ct)
            for c0, c1 in strips(n, width):
                mx = np.maximum(mx, rows[:, c0:c1].max(axis=1))
            total = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(n, width):
                total += np.exp(rows[:, c0:c1] - mx[:, None]).sum(axis=1)
        for c0, c1 in strips(n, width):
            out[r0:r1, c0:c1] = np.exp(rows[:, c0:c1] - mx[:, None]) / total[:, None]

    with np.errstate(over="ignore", invalid="ignore"):
        row_blocks(m, p["tile_m"], p["worker_count"], block)
    return out


def softmax_two_pass(p, inputs, dtype):
    return _softmax(p, inputs, dtype, "two_pass")


def softmax_online(p, inputs, dtype):
    return _softmax(p, inputs, dtype, "online")


def softmax_naive(p, inputs, dtype):
    # no max subtraction: overflows on large logits
    return _softmax(p, inputs, dtype, "naive")


# ---------------------------------------------------------------- layernorm

def _layernorm(p, inputs, dtype, welford):
    ct = compute_type(dtype, p["accum_precision"])
    x = inputs[0].astype(ct)
    w = inputs[1].astype(ct)
    bias = inputs[2].astype(ct)
    m, n = x.shape
    out = np.empty((m, n), ct)
    width = strip_width(p)

    def block(r0, r1):
        rows = x[r0:r1]
        if welford:
            # single statistics pass, strips merged with Chan's update
            count = 0
            mean = np.zeros(r1 - r0, ct)
            m2 = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(n, width):
                s = rows[:, c0:c1]
                nb = c1 - c0
                mb = s.mean(axis=1)
                m2b = ((s - mb[:, None]) ** 2).sum(axis=1)
                tot = count + nb
                delta = mb - mean
                mean = mean + delta * (nb / tot)
                m2 = m2 + m2b + delta * delta * (count * nb / tot)
                count = tot
            var = m2 / n
        else:
            total = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(n, width):
                total += rows[:, c0:c1].sum(axis=1)
            mean = total / n
            sq = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(n, width):
                d = rows[:, c0:c1] - mean[:, None]
                sq += (d * d).sum(axis=1)
            var = sq / n
        inv = 1.0 / np.sqrt(var + ct(EPS))
        for c0, c1 in strips(n, width):
            out[r0:r1, c0:c1] = (rows[:, c0:c1] - mean[:, None]) * inv[:, None] * w[c0:c1] + bias[c0:c1]

    row_blocks(m, p["tile_m"], p["worker_count"], block)
    return out


def layernorm_two_pass(p, inputs, dtype):
    return _layernorm(p, inputs, dtype, welford=False)


def layernorm_welford(p, inputs, dtype):
    return _layernorm(p, inputs, dtype, welford=True)


# ---------------------------------------------------------------- rmsnorm

def _rmsnorm(p, inputs, dtype, drop_tail=False):
    ct = compute_type(dtype, p["accum_precision"])
    x = inputs[0].astype(ct)
    w = inputs[1].astype(ct)
    m, n = x.shape
    width = strip_width(p)
    covered = (n // width) * width if drop_tail else n
    out = np.zeros((m, n), ct)

    def block(r0, r1):
        rows = x[r0:r1]
        ss = np.zeros(r1 - r0, ct)
        for c0, c1 in strips(covered, width):
            s = rows[:, c0:c1]
            ss += (s * s).sum(axis=1)
        inv = 1.0 / np.sqrt(ss / n + ct(EPS))
        for c0, c1 in strips(covered, width):
            out[r0:r1, c0:c1] = rows[:, c0:c1] * inv[:, None] * w[c0:c1]

    row_blocks(m, p["tile_m"], p["worker_count"], block)
    return out


def rmsnorm_tiled(p, inputs, dtype):
    return _rmsnorm(p, inputs, dtype)


def rmsnorm_masking_bug(p, inputs, dtype):
    # forgets the partial strip when N is not a multiple of the strip width
    return _rmsnorm(p, inputs, dtype, drop_tail=True)


# ---------------------------------------------------------------- cross entropy

def _cross_entropy(p, inputs, dtype, mode):
    ct = compute_type(dtype, p["accum_precision"])
    x = inputs[0].astype(ct)
    targets = inputs[1].data
    m, v = x.shape
    out = np.empty(m, ct)
    width = strip_width(p)

    def block(r0, r1):
        rows = x[r0:r1]
        picked = rows[np.arange(r1 - r0), targets[r0:r1]]
        if mode == "naive":
            total = np.zeros(r1 - r0, ct)
            for c0, c1 in strips(v, width):
                total += np.exp(rows[:, c0:c1]).sum(axis=1)
            out[r0:r1] = np.log(total) - picked
            return
        mx = np.full(r1 - r0, -np.inf, ct)
        total = np.zeros(r1 - r0, ct)
        if mode == "online":
            for c0, c1 in strips(v, width):
                s = rows[:, c0:c1]
                new = np.maximum(mx, s.max(axis=1))
                total = total * np.exp(mx - new) + np.exp(s - new[:, None]).sum(axis=1)
                mx = new
        else:
            for c0, c1 in strips(v, width):
                mx = np.maximum(mx, rows[:, c0:c1].max(axis=1))
            for c0, c1 in strips(v, width):
                total += np.exp(rows[:, c0:c1] - mx[:, None]).sum(axis=1)
        out[r0:r1] = np.log(total) + mx - picked

    with np.errstate(over="ignore", invalid="ignore"):
        row_blocks(m, p["tile_m"], p["worker_count"], block)
    return out


def cross_entropy_two_pass(p, inputs, dtype):
    return _cross_entropy(p, inputs, dtype, "two_pass")


def cross_entropy_online(p, inputs, dtype):
    return _cross_entropy(p, inputs, dtype, "online")


def cross_entropy_naive(p, inputs, dtype):
    return _cross_entropy(p, inputs, dtype, "naive")


# ---------------------------------------------------------------- rotary

def rotary_tiled(p, inputs, dtype):
    ct = compute_type(dtype, p["accum_precision"])
    x = inputs[0].astype(ct)
    b, h, s, d = x.shape
    x = x.reshape(b * h, s, d)
    cos = inputs[1].astype(ct)
    sin = inputs[2].astype(ct)
    out = np.empty_like(x)
    width = strip_width(p)

    def block(r0, r1):
        for c0, c1 in strips(s, width):
            seg = x[r0:r1, c0:c1]
            x0, x1 = seg[..., 0::2], seg[..., 1::2]
            cs, sn = cos[c0:c1], sin[c0:c1]
            out[r0:r1, c0:c1, 0::2] = x0 * cs - x1 * sn
            out[r0:r1, c0:c1, 1::2] = x0 * sn + x1 * cs

    row_blocks(b * h, p["tile_m"], p["worker_count"], block)
    return out.reshape(b, h, s, d)


# ---------------------------------------------------------------- reduce

def _strip_sum(block: np.ndarray, order: str) -> np.ndarray:
    if order == "sequential":
        return np.cumsum(block, axis=1)[:, -1]
    # adjacent pairs, level by level
    cur = block
    while cur.shape[1] > 1:
        if cur.shape[1] % 2:
            cur = np.concatenate([cur, np.zeros((cur.shape[0], 1), cur.dtype)], axis=1)
        cur = cur[:, 0::2] + cur[:, 1::2]
    return cur[:, 0]


def _reduce(p, inputs, dtype, order_for_call):
    ct = compute_type(dtype, p["accum_precision"])
    x = inputs[0].astype(ct)
    m, n = x.shape
    out = np.zeros(m, ct)
    width = strip_width(p)

    def block(r0, r1):
        acc = np.zeros(r1 - r0, ct)
        for c0, c1 in strips(n, width):
            acc += _strip_sum(x[r0:r1, c0:c1], order_for_call)
        out[r0:r1] = acc

    row_blocks(m, p["tile_m"], p["worker_count"], block)
    return out


def reduce_tiled(p, inputs, dtype):
    return _reduce(p, inputs, dtype, p["reduction_order"])


_racy_calls = itertools.count()


def reduce_racy(p, inputs, dtype):
    # stands in for an atomics-based reduction: the summation order changes from call to call
    order = ("sequential", "pairwise_tree")[next(_racy_calls) % 2]
    return _reduce(p, inputs, dtype, order)
