"""Desk-scale kernel zoo: fp64 oracles, tunable CPU variants, sweep tables and input generators."""

from kernelloop.zoo.buffers import Comparison, TensorBuffer, compare
from kernelloop.zoo.inputs import adversarial_inputs, determinism_inputs, make_inputs
from kernelloop.zoo.params import DOMAINS, CandidateConfig, ParamDomain, parse_config
from kernelloop.zoo.reference import infer_shape, reference_execute
from kernelloop.zoo.sweeps import SweepEntry, desk_shape, shape_sweep
from kernelloop.zoo.variants import (
    EXECUTABLE_TYPES, STARTER_VARIANT, Variant, candidate_execute, default_config,
    enumerate_params, fixture_variants, get_variant, random_config, switch_variant,
    validate_config, variants_for,
)

__all__ = [
    "Comparison", "TensorBuffer", "compare", "adversarial_inputs", "determinism_inputs",
    "make_inputs", "DOMAINS", "CandidateConfig", "ParamDomain", "parse_config", "infer_shape",
    "reference_execute", "SweepEntry", "desk_shape", "shape_sweep", "EXECUTABLE_TYPES",
    "STARTER_VARIANT", "Variant", "candidate_execute", "default_config", "enumerate_params",
    "fixture_variants", "get_variant", "random_config", "switch_variant", "validate_config",
    "variants_for",
]
