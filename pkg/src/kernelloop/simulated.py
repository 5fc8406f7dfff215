"""Synthetic timing for tests and dry runs.

Every config runs at ``nominal * speed(config)`` work units per second, so measured
throughputs and end-to-end times are exact functions of a speed table."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

from kernelloop.core import work_of
from kernelloop.zoo.params import CandidateConfig


@dataclass
class SimulatedTiming:
    speeds: Mapping[str, float] | Callable[[CandidateConfig], float] = field(default_factory=dict)
    nominal: float = 1e9
    default_speed: float = 1.0

    def speed(self, config: CandidateConfig | None) -> float:
        if config is None:
            return 1.0
        if callable(self.speeds):
            return float(self.speeds(config))
        return float(self.speeds.get(config.digest(), self.default_speed))

    def samples(self, config, spec, settings):
        elapsed = work_of(spec.kernel_type, spec.primary_shape, spec.dtype) / (self.nominal * self.speed(config))
        return [elapsed] * settings.timed_iters

    def op_seconds(self, op, config: CandidateConfig | None) -> float:
        """Seconds for one call of ``op``: its declared cost, or else its work at the nominal
        rate (unclassified ops count one read and one write per element), divided by the
        config's speed."""
        from kernelloop.profiler import op_kernel_type

        if op.cost is not None:
            base = op.cost
        else:
            kt = op_kernel_type(op)
            if kt is not None:
                base = work_of(kt, op.shape, op.dtype) / self.nominal
            else:
                base = 2 * op.shape.numel() * op.dtype.size_bytes / self.nominal
        return base / self.speed(config)


def hashed_speed(config: CandidateConfig) -> float:
    """A fixed pseudo-random speed in [0.5, 2.0) per config, for dry runs of the whole pipeline."""
    return 0.5 + 1.5 * (zlib.crc32(config.digest().encode()) % 10_000) / 10_000
