"""Candidate configurations: the discrete search space and the canonical config file format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

from kernelloop.core import KernelType, parse_key_values
from kernelloop.errors import ConfigError, ParseError

SCHEMA_VERSION = 1

TILE_SIZES = (8, 16, 32, 64, 128, 256)
VECTOR_WIDTHS = (1, 2, 4, 8)
UNROLLS = (1, 2, 4)
ACCUM = ("same", "widened")
WORKERS = (1, 2, 4, 8)
ORDERS = ("sequential", "pairwise_tree")


@dataclass(frozen=True)
class ParamDomain:
    name: str
    values: tuple
    tier: int

    @property
    def numeric(self) -> bool:
        return all(isinstance(v, int) for v in self.values)


# tier tags follow the optimization playbook: 1 block sizes, 2 memory access,
# 3 compute, 4 advanced reductions, 5 hardware-specific, 6 kernel-specific algorithm
DOMAINS = {
    "tile_m": ParamDomain("tile_m", TILE_SIZES, 1),
    "tile_n": ParamDomain("tile_n", TILE_SIZES, 1),
    "tile_k": ParamDomain("tile_k", TILE_SIZES, 1),
    "vector_width": ParamDomain("vector_width", VECTOR_WIDTHS, 2),
    "unroll": ParamDomain("unroll", UNROLLS, 3),
    "accum_precision": ParamDomain("accum_precision", ACCUM, 3),
    "reduction_order": ParamDomain("reduction_order", ORDERS, 4),
    "worker_count": ParamDomain("worker_count", WORKERS, 5),
}

VARIANT_TIER = 6

_RESERVED = ("kernel_type", "variant", "schema_version")


@dataclass(frozen=True)
class CandidateConfig:
    kernel_type: KernelType
    variant: str
    params: tuple[tuple[str, object], ...]
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "kernel_type", KernelType(self.kernel_type))
        object.__setattr__(self, "params", tuple(sorted(self.params)))

    @classmethod
    def make(cls, kernel_type, variant: str, params: Mapping[str, object] | None = None,
             validate: bool = True) -> "CandidateConfig":
        kt = KernelType.parse(kernel_type) if isinstance(kernel_type, str) else KernelType(kernel_type)
        cfg = cls(kt, variant, tuple((params or {}).items()))
        if validate:
            from kernelloop.zoo.variants import validate_config

            validate_config(cfg)
        return cfg

    def param(self, name: str):
        for k, v in self.params:
            if k == name:
                return v
        raise ConfigError(f"config has no parameter {name!r}")

    def as_dict(self) -> dict[str, object]:
        return dict(self.params)

    def with_params(self, **changes) -> "CandidateConfig":
        merged = self.as_dict()
        merged.update(changes)
        return CandidateConfig(self.kernel_type, self.variant, tuple(merged.items()), self.schema_version)

    def serialize(self) -> str:
        entries = {"kernel_type": self.kernel_type.value, "variant": self.variant,
                   "schema_version": str(self.schema_version)}
        for k, v in self.params:
            entries[k] = str(v)
        return "".join(f"{k}={entries[k]}\n" for k in sorted(entries))

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    def describe(self) -> str:
        inner = " ".join(f"{k}={v}" for k, v in self.params)
        return f"{self.kernel_type.value}/{self.variant} {inner}".strip()


def _coerce(name: str, raw: str):
    domain = DOMAINS.get(name)
    if domain is not None and domain.numeric:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"parameter {name} expects an integer, got {raw!r}") from None
    return raw


def parse_config(text: str, path=None, validate: bool = True) -> CandidateConfig:
    entries = parse_key_values(text, path)
    for key in _RESERVED:
        if key not in entries:
            raise ParseError(f"config is missing {key!r}", path)
    try:
        version = int(entries["schema_version"])
    except ValueError:
        raise ParseError(f"bad schema_version {entries['schema_version']!r}", path) from None
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    params = {k: _coerce(k, v) for k, v in entries.items() if k not in _RESERVED}
    cfg = CandidateConfig(KernelType.parse(entries["kernel_type"]), entries["variant"],
                          tuple(params.items()), version)
    if validate:
        from kernelloop.zoo.variants import validate_config

        validate_config(cfg)
    return cfg
