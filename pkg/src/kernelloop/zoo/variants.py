"""Variant registry: which implementations exist per kernel type, their parameters and starters."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from kernelloop.core import DType, KernelType, WorkloadShape
from kernelloop.errors import ConfigError
from kernelloop.zoo import kernels as K
from kernelloop.zoo.buffers import TensorBuffer
from kernelloop.zoo.params import DOMAINS, VARIANT_TIER, CandidateConfig, ParamDomain
from kernelloop.zoo.reference import infer_shape

ROW_PARAMS = ("tile_m", "tile_n", "vector_width", "unroll", "accum_precision", "worker_count")
ROW_DEFAULTS = {"tile_m": 32, "tile_n": 64, "vector_width": 1, "unroll": 1,
                "accum_precision": "same", "worker_count": 1}
MATMUL_PARAMS = ("tile_m", "tile_n", "tile_k", "accum_precision", "worker_count")
MATMUL_DEFAULTS = {"tile_m": 32, "tile_n": 32, "tile_k": 32, "accum_precision": "same", "worker_count": 1}


@dataclass(frozen=True)
class Variant:
    kernel_type: KernelType
    name: str
    fn: Callable
    defaults: dict = field(hash=False)
    # harness stage at which this deliberately wrong fixture must be rejected; None for correct variants
    fixture_stage: str | None = None
    summary: str = ""

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self.defaults)

    @property
    def is_fixture(self) -> bool:
        return self.fixture_stage is not None


def output_shape(kernel_type: KernelType, shape: WorkloadShape) -> tuple[int, ...]:
    d = shape.as_dict()
    if kernel_type is KernelType.MATMUL:
        return (d["M"], d["N"])
    if kernel_type in (KernelType.CROSS_ENTROPY, KernelType.REDUCE):
        return (d["M"],)
    if kernel_type is KernelType.FUSED_MLP:
        return (d["M"], d["D"])
    if kernel_type in (KernelType.ROTARY_EMB, KernelType.FLASH_ATTN):
        return (d["B"], d["H"], d["S"], d["D"])
    return (d["M"], d["N"])


def _broken_for(kernel_type: KernelType):
    def broken(p, inputs, dtype):
        return np.zeros(output_shape(kernel_type, infer_shape(kernel_type, inputs)), np.float32)

    return broken


_REGISTRY: dict[KernelType, dict[str, Variant]] = {}


def _add(kernel_type, name, fn, defaults, fixture_stage=None, summary=""):
    _REGISTRY.setdefault(kernel_type, {})[name] = Variant(
        kernel_type, name, fn, dict(defaults), fixture_stage, summary)


_add(KernelType.MATMUL, "tiled", K.matmul_tiled, MATMUL_DEFAULTS, summary="blocked M/N/K tiles")
_add(KernelType.MATMUL, "naive", K.matmul_naive, {"unroll": 1, "accum_precision": "same"},
     summary="rank-unroll updates over K (slow starter)")
_add(KernelType.MATMUL, "tall_bug", K.matmul_tall_bug, MATMUL_DEFAULTS, "shape_sweep",
     "drops the last row tile on tall problems")

_add(KernelType.SOFTMAX, "two_pass", K.softmax_two_pass, ROW_DEFAULTS, summary="max pass, sum pass, write")
_add(KernelType.SOFTMAX, "online", K.softmax_online, ROW_DEFAULTS,
     summary="running max and normalizer in one pass, then write")
_add(KernelType.SOFTMAX, "naive", K.softmax_naive, ROW_DEFAULTS, "stability", "no max subtraction")

_add(KernelType.LAYERNORM, "two_pass", K.layernorm_two_pass, ROW_DEFAULTS, summary="mean pass, variance pass")
_add(KernelType.LAYERNORM, "welford", K.layernorm_welford, ROW_DEFAULTS,
     summary="single-pass Welford/Chan statistics")

_add(KernelType.RMSNORM, "tiled", K.rmsnorm_tiled, ROW_DEFAULTS, summary="sum of squares then scale")
_add(KernelType.RMSNORM, "masking_bug", K.rmsnorm_masking_bug, {**ROW_DEFAULTS, "tile_n": 16},
     "edge_cases", "ignores the partial final strip")

_add(KernelType.CROSS_ENTROPY, "two_pass", K.cross_entropy_two_pass, ROW_DEFAULTS, summary="max pass then sum")
_add(KernelType.CROSS_ENTROPY, "online", K.cross_entropy_online, ROW_DEFAULTS, summary="online log-sum-exp")
_add(KernelType.CROSS_ENTROPY, "naive", K.cross_entropy_naive, ROW_DEFAULTS, "stability",
     "log-sum-exp without max subtraction")

_add(KernelType.ROTARY_EMB, "tiled", K.rotary_tiled, ROW_DEFAULTS, summary="interleaved pair rotation")

_add(KernelType.REDUCE, "tiled", K.reduce_tiled, {**ROW_DEFAULTS, "reduction_order": "sequential"},
     summary="strip sums accumulated per row")
_add(KernelType.REDUCE, "racy", K.reduce_racy, {**ROW_DEFAULTS, "reduction_order": "sequential"},
     "determinism", "summation order flips between calls")

for _kt in list(_REGISTRY):
    _first = next(iter(_REGISTRY[_kt].values()))
    _add(_kt, "broken", _broken_for(_kt), _first.defaults, "smoke", "returns zeros")

#: per-type starter variant written by extraction
STARTER_VARIANT = {
    KernelType.MATMUL: "tiled",
    KernelType.SOFTMAX: "two_pass",
    KernelType.LAYERNORM: "two_pass",
    KernelType.RMSNORM: "tiled",
    KernelType.CROSS_ENTROPY: "two_pass",
    KernelType.ROTARY_EMB: "tiled",
    KernelType.REDUCE: "tiled",
}

EXECUTABLE_TYPES = tuple(STARTER_VARIANT)


def variants_for(kernel_type: KernelType, include_fixtures: bool = False) -> list[Variant]:
    found = _REGISTRY.get(KernelType(kernel_type), {})
    return [v for v in found.values() if include_fixtures or not v.is_fixture]


def get_variant(kernel_type: KernelType, name: str) -> Variant:
    try:
        return _REGISTRY[KernelType(kernel_type)][name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r} for {KernelType(kernel_type).value}") from None


def fixture_variants() -> list[Variant]:
    return [v for vs in _REGISTRY.values() for v in vs.values() if v.is_fixture]


def enumerate_params(kernel_type: KernelType, variant: str) -> list[ParamDomain]:
    """Legal discrete domains and playbook tier tags for a variant, plus the
    tier-6 choice among the type's correct variants when there is more than one."""
    v = get_variant(kernel_type, variant)
    out = [DOMAINS[name] for name in v.param_names]
    correct = tuple(x.name for x in variants_for(kernel_type))
    if len(correct) > 1 and not v.is_fixture:
        out.append(ParamDomain("variant", correct, VARIANT_TIER))
    return out


def validate_config(config: CandidateConfig) -> None:
    v = get_variant(config.kernel_type, config.variant)
    got = set(k for k, _ in config.params)
    want = set(v.param_names)
    if got != want:
        missing, extra = sorted(want - got), sorted(got - want)
        raise ConfigError(f"{config.kernel_type.value}/{config.variant}: missing {missing}, unexpected {extra}")
    for k, val in config.params:
        if val not in DOMAINS[k].values:
            raise ConfigError(f"{k}={val!r} not in {DOMAINS[k].values}")


def default_config(kernel_type: KernelType, variant: str | None = None) -> CandidateConfig:
    kt = KernelType(kernel_type)
    if variant is None:
        if kt not in STARTER_VARIANT:
            raise ConfigError(f"{kt.value} has no executable variants")
        variant = STARTER_VARIANT[kt]
    v = get_variant(kt, variant)
    return CandidateConfig(kt, variant, tuple(v.defaults.items()))


def switch_variant(config: CandidateConfig, variant: str) -> CandidateConfig:
    """Move to another variant, carrying over every parameter the new variant shares."""
    target = get_variant(config.kernel_type, variant)
    current = config.as_dict()
    params = {k: current.get(k, d) for k, d in target.defaults.items()}
    return CandidateConfig(config.kernel_type, variant, tuple(params.items()))


def random_config(kernel_type: KernelType, rng: random.Random, variant: str | None = None) -> CandidateConfig:
    kt = KernelType(kernel_type)
    choices = [v.name for v in variants_for(kt)]
    name = variant or rng.choice(choices)
    v = get_variant(kt, name)
    params = {k: rng.choice(DOMAINS[k].values) for k in v.param_names}
    return CandidateConfig(kt, name, tuple(params.items()))


def candidate_execute(config: CandidateConfig, inputs: Sequence[TensorBuffer], dtype: DType) -> TensorBuffer:
    """Run a candidate. Non-finite outputs are returned as-is; the harness judges them."""
    validate_config(config)
    infer_shape(config.kernel_type, inputs)
    v = get_variant(config.kernel_type, config.variant)
    out = v.fn(config.as_dict(), inputs, DType(dtype))
    with np.errstate(over="ignore", invalid="ignore"):
        return TensorBuffer.from_array(out, DType(dtype))
