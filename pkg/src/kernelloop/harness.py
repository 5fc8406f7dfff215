"""Five-stage correctness gate and performance measurement.

Stages run in a fixed order (smoke, shape_sweep, stability, determinism,
edge_cases) and the first failure stops the pipeline. Throughput is measured
only for candidates that pass all five stages.
"""

from __future__ import annotations

import enum
import math
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Protocol, Sequence

from kernelloop.core import (
    SWEEP_DTYPES, DType, HardwareSpec, KernelSpec, RooflineStatus, WorkloadShape,
    roofline, tolerance_for, work_of,
)
from kernelloop.errors import ConfigError, MeasurementError
from kernelloop.zoo.buffers import compare
from kernelloop.zoo.inputs import adversarial_inputs, determinism_inputs, make_inputs
from kernelloop.zoo.params import CandidateConfig
from kernelloop.zoo.reference import reference_execute
from kernelloop.zoo.sweeps import EDGE_DIMS, EDGE_SIZES, SMOKE_SHAPES, desk_shape, shape_sweep
from kernelloop.zoo.variants import candidate_execute

#: held while timing or checking determinism so no other candidate runs concurrently
MEASURE_LOCK = threading.RLock()


class Stage(str, enum.Enum):
    SMOKE = "smoke"
    SHAPE_SWEEP = "shape_sweep"
    STABILITY = "stability"
    DETERMINISM = "determinism"
    EDGE_CASES = "edge_cases"


STAGE_ORDER = tuple(Stage)


@dataclass(frozen=True)
class Failure:
    case: str
    kind: str  # "tolerance", "nonfinite", "shape", "nondeterministic", "crash"
    max_abs_error: float = math.inf
    message: str = ""

    def __str__(self) -> str:
        if self.kind == "tolerance":
            return f"{self.case}: max|err|={self.max_abs_error:.3g}"
        if self.message:
            return f"{self.case}: {self.kind} ({self.message})"
        return f"{self.case}: {self.kind}"


@dataclass(frozen=True)
class StageResult:
    stage: Stage
    passed: bool
    detail: str
    cases_run: int
    first_failure: Failure | None = None

    def __post_init__(self):
        if not self.passed and self.first_failure is None:
            raise ValueError("a failed stage must carry its first failure")


@dataclass(frozen=True)
class VerificationReport:
    stages: tuple[StageResult, ...]
    throughput: float | None = None
    elapsed_trimmed_mean: float | None = None
    roofline: RooflineStatus | None = None

    def __post_init__(self):
        names = [s.stage for s in self.stages]
        if names != list(STAGE_ORDER[: len(names)]):
            raise ValueError(f"stages out of pipeline order: {names}")
        if any(not s.passed for s in self.stages[:-1]):
            raise ValueError("no stage may follow a failed stage")
        # verify() returns stage-only reports; bench() adds throughput to every passing one
        if self.throughput is not None and not self.all_passed:
            raise ValueError("throughput is only measured after every stage passed")

    @property
    def all_passed(self) -> bool:
        return len(self.stages) == len(STAGE_ORDER) and all(s.passed for s in self.stages)

    @property
    def failed_stage(self) -> Stage | None:
        for s in self.stages:
            if not s.passed:
                return s.stage
        return None

    def with_measurement(self, elapsed: float, throughput: float,
                         status: RooflineStatus | None) -> "VerificationReport":
        return VerificationReport(self.stages, throughput, elapsed, status)

    def tsv_lines(self) -> list[str]:
        lines = []
        for s in self.stages:
            fail = str(s.first_failure) if s.first_failure else "-"
            lines.append("\t".join([s.stage.value, "pass" if s.passed else "FAIL", str(s.cases_run), fail]))
        summary = ["summary", "pass" if self.all_passed else "FAIL",
                   f"{self.throughput:.6g}" if self.throughput is not None else "-",
                   self.roofline.summary() if self.roofline else "-"]
        lines.append("\t".join(summary))
        return lines

    def render(self) -> str:
        out = []
        for s in self.stages:
            mark = "PASS" if s.passed else "FAIL"
            out.append(f"[{mark}] {s.stage.value:<12} {s.cases_run:>3} cases  {s.detail}")
        if self.throughput is not None:
            out.append(f"throughput {self.throughput:.4g} (trimmed mean {self.elapsed_trimmed_mean * 1e6:.1f} us)")
        if self.roofline is not None:
            out.append(f"roofline {self.roofline.summary()}")
        return "\n".join(out) + "\n"


@dataclass(frozen=True)
class MeasureSettings:
    warmup_iters: int = 25
    timed_iters: int = 200
    trim_fraction: float = 0.10

    def __post_init__(self):
        if self.warmup_iters < 0 or self.timed_iters < 1:
            raise ConfigError("need warmup_iters >= 0 and timed_iters >= 1")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigError("trim_fraction must lie in [0, 0.5)")
        if self.trim_fraction > 0 and self.timed_iters * self.trim_fraction < 1:
            raise ConfigError("timed_iters * trim_fraction must be at least 1 when trimming")


@dataclass(frozen=True)
class HarnessSettings:
    """Knobs for running the gate on a CPU.

    ``sweep_divisor`` shrinks the sweep-table shapes (see ``desk_shape``); the
    stability, determinism and edge-case stages start from the spec shape
    shrunk the same way. ``sweep_divisor=1`` runs the tables at full size.
    """

    sweep_divisor: int = 8
    sweep_dtypes: tuple[DType, ...] = SWEEP_DTYPES
    determinism_runs: int = 3

    def __post_init__(self):
        if self.sweep_divisor < 1 or self.determinism_runs < 2:
            raise ConfigError("sweep_divisor >= 1 and determinism_runs >= 2 required")


def trimmed_mean(samples: Sequence[float], trim_fraction: float = 0.10) -> float:
    """Drop floor(trim * n) samples from each end of the sorted list and average the rest."""
    if len(samples) == 0:
        raise MeasurementError("no samples")
    xs = sorted(samples)
    k = int(math.floor(trim_fraction * len(xs) + 1e-12))
    kept = xs[k: len(xs) - k] if k else xs
    if not kept:
        raise MeasurementError("trimming removed every sample")
    return math.fsum(kept) / len(kept)


# ---------------------------------------------------------------- cases

@lru_cache(maxsize=128)
def _random_case(kt, shape: WorkloadShape, dtype: DType):
    inputs = make_inputs(kt, shape, dtype)
    return inputs, reference_execute(kt, inputs)


@lru_cache(maxsize=64)
def _adversarial_cases(kt, shape: WorkloadShape, dtype: DType):
    return tuple((name, inputs, reference_execute(kt, inputs))
                 for name, inputs in adversarial_inputs(kt, shape, dtype).items())


def _run_case(config, inputs, ref, dtype, case) -> Failure | None:
    try:
        out = candidate_execute(config, inputs, dtype)
    except Exception as exc:  # a crashing candidate fails its stage, never the harness
        return Failure(case, "crash", message=f"{type(exc).__name__}: {exc}")
    cmp = compare(out, ref, tolerance_for(dtype))
    if cmp.ok:
        return None
    return Failure(case, cmp.kind, cmp.max_abs_error)


def _stage(stage: Stage, cases: list[tuple[str, Callable[[], Failure | None]]]) -> StageResult:
    run = 0
    for name, check in cases:
        run += 1
        failure = check()
        if failure is not None:
            return StageResult(stage, False, f"failed at {failure}", run, failure)
    return StageResult(stage, True, f"{run} cases ok", run)


def _compare_case(config, kt, shape, dtype, label):
    def check():
        inputs, ref = _random_case(kt, shape, dtype)
        return _run_case(config, inputs, ref, dtype, label)

    return label, check


def _smoke(config, spec, settings):
    shape = SMOKE_SHAPES[spec.kernel_type]
    return _stage(Stage.SMOKE, [_compare_case(config, spec.kernel_type, shape, spec.dtype, f"smoke {shape}")])


def _shape_sweep(config, spec, settings):
    cases = []
    for entry in shape_sweep(spec.kernel_type):
        shape = desk_shape(entry.shape, settings.sweep_divisor)
        for dt in settings.sweep_dtypes:
            cases.append(_compare_case(config, spec.kernel_type, shape, dt, f"{entry.name} {shape} {dt.value}"))
    return _stage(Stage.SHAPE_SWEEP, cases)


def _stability(config, spec, settings):
    shape = desk_shape(spec.primary_shape, settings.sweep_divisor)
    cases = []
    for name, inputs, ref in _adversarial_cases(spec.kernel_type, shape, spec.dtype):
        cases.append((name, lambda i=inputs, r=ref, n=name: _run_case(config, i, r, spec.dtype, n)))
    return _stage(Stage.STABILITY, cases)


def _determinism(config, spec, settings):
    shape = desk_shape(spec.primary_shape, settings.sweep_divisor)
    label = f"repeat x{settings.determinism_runs} {shape}"

    def check():
        inputs = determinism_inputs(spec.kernel_type, shape, spec.dtype)
        seen = None
        with MEASURE_LOCK:
            for run in range(settings.determinism_runs):
                try:
                    bits = candidate_execute(config, inputs, spec.dtype).bits()
                except Exception as exc:
                    return Failure(label, "crash", message=f"{type(exc).__name__}: {exc}")
                if seen is None:
                    seen = bits
                elif bits != seen:
                    return Failure(label, "nondeterministic", message=f"run {run + 1} differs from run 1")
        return None

    return _stage(Stage.DETERMINISM, [(label, check)])


def edge_shapes(spec: KernelSpec, divisor: int = 8) -> list[tuple[str, WorkloadShape]]:
    base = desk_shape(spec.primary_shape, divisor)
    out = []
    for dim in EDGE_DIMS[spec.kernel_type]:
        for size in EDGE_SIZES:
            out.append((f"{dim}={size}", base.replace(**{dim: size})))
    return out


def _edge_cases(config, spec, settings):
    cases = [_compare_case(config, spec.kernel_type, shape, spec.dtype, f"{label} {shape}")
             for label, shape in edge_shapes(spec, settings.sweep_divisor)]
    return _stage(Stage.EDGE_CASES, cases)


_STAGE_FNS = {
    Stage.SMOKE: _smoke,
    Stage.SHAPE_SWEEP: _shape_sweep,
    Stage.STABILITY: _stability,
    Stage.DETERMINISM: _determinism,
    Stage.EDGE_CASES: _edge_cases,
}


def verify(config: CandidateConfig, spec: KernelSpec, settings: HarnessSettings | None = None) -> VerificationReport:
    if config.kernel_type is not spec.kernel_type:
        raise ConfigError(f"config is for {config.kernel_type.value}, spec is {spec.kernel_type.value}")
    settings = settings or HarnessSettings()
    results = []
    for stage in STAGE_ORDER:
        result = _STAGE_FNS[stage](config, spec, settings)
        results.append(result)
        if not result.passed:
            break
    return VerificationReport(tuple(results))


# ---------------------------------------------------------------- timing

class TimingBackend(Protocol):
    def samples(self, config: CandidateConfig, spec: KernelSpec, settings: MeasureSettings) -> list[float]:
        ...


@dataclass
class WallClock:
    """Times real executions at the spec's primary shape with the monotonic clock."""

    clock: Callable[[], float] = time.perf_counter
    _inputs: dict = field(default_factory=dict, repr=False)

    def samples(self, config, spec, settings):
        key = (spec.kernel_type, spec.primary_shape, spec.dtype)
        if key not in self._inputs:
            self._inputs = {key: make_inputs(*key)}
        inputs = self._inputs[key]
        for _ in range(settings.warmup_iters):
            candidate_execute(config, inputs, spec.dtype)
        out = []
        for _ in range(settings.timed_iters):
            t0 = self.clock()
            candidate_execute(config, inputs, spec.dtype)
            out.append(self.clock() - t0)
        return out


def measure(config: CandidateConfig, spec: KernelSpec, settings: MeasureSettings | None = None,
            hw: HardwareSpec | None = None, backend: TimingBackend | None = None):
    """Returns (trimmed-mean seconds, throughput in FLOP/s or B/s, roofline status or None)."""
    settings = settings or MeasureSettings()
    backend = backend or WallClock()
    with MEASURE_LOCK:
        samples = backend.samples(config, spec, settings)
    if not samples or not all(math.isfinite(s) and s > 0 for s in samples):
        raise MeasurementError("timing produced a non-finite or non-positive sample")
    elapsed = trimmed_mean(samples, settings.trim_fraction)
    throughput = work_of(spec.kernel_type, spec.primary_shape, spec.dtype) / elapsed
    status = roofline(spec.flops, spec.bytes, elapsed, hw) if hw is not None else None
    return elapsed, throughput, status


def bench(config: CandidateConfig, spec: KernelSpec, settings: MeasureSettings | None = None,
          hw: HardwareSpec | None = None, harness: HarnessSettings | None = None,
          backend: TimingBackend | None = None) -> VerificationReport:
    report = verify(config, spec, harness)
    if not report.all_passed:
        return report
    elapsed, throughput, status = measure(config, spec, settings, hw, backend)
    return report.with_measurement(elapsed, throughput, status)

