"""Amdahl ranking of profiled kernels and extraction of per-kernel workspaces."""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from kernelloop.core import (
    DType, HardwareSpec, KernelSpec, KernelType, Tolerance, WorkloadShape, parse_key_values,
)
from kernelloop.errors import DomainError, ExtractionError, ParseError, PlanError
from kernelloop.ledger import new_ledger, read_ledger
from kernelloop.profiler import Profile, parse_hardware_field
from kernelloop.zoo.params import CandidateConfig, parse_config
from kernelloop.zoo.variants import EXECUTABLE_TYPES, default_config

WHAT_IF_SPEEDUPS = (1.5, 2.0, 3.0, 5.0)
DEFAULT_MIN_FRACTION = 0.01
PLAN_MAGIC = "# kernelloop-plan v1"
SPEC_FILE = "spec.cfg"
CONFIG_FILE = "candidate.cfg"
LEDGER_FILE = "ledger.tsv"


def amdahl(f: float, s: float) -> float:
    """End-to-end speedup when a fraction ``f`` of runtime gets ``s`` times faster."""
    if not (0.0 <= f <= 1.0) or math.isnan(f):
        raise DomainError(f"time fraction must be in [0, 1], got {f}")
    if not (s > 0) or not math.isfinite(s):
        raise DomainError(f"kernel speedup must be positive and finite, got {s}")
    return 1.0 / ((1.0 - f) + f / s)


def compose_amdahl(fractions: Sequence[float], speedups: Sequence[float]) -> float:
    """Overall speedup 1 / (sum f_i/s_i + (1 - sum f_i)) for disjoint accelerated fractions."""
    if len(fractions) != len(speedups):
        raise DomainError("need one speedup per fraction")
    total = math.fsum(fractions)
    if total > 1.0 + 1e-12 or any(f < 0 for f in fractions):
        raise DomainError(f"fractions must be non-negative and sum to at most 1, got {total}")
    for s in speedups:
        if not (s > 0) or not math.isfinite(s):
            raise DomainError(f"kernel speedup must be positive and finite, got {s}")
    return 1.0 / (math.fsum(f / s for f, s in zip(fractions, speedups)) + max(0.0, 1.0 - total))


@dataclass(frozen=True)
class AmdahlProjection:
    f: float
    s: float
    S: float

    @classmethod
    def of(cls, f: float, s: float) -> "AmdahlProjection":
        return cls(f, s, amdahl(f, s))


@dataclass(frozen=True)
class PlanEntry:
    spec: KernelSpec
    f: float
    op_names: tuple[str, ...] = ()
    what_if: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.what_if:
            object.__setattr__(self, "what_if", {s: amdahl(self.f, s) for s in WHAT_IF_SPEEDUPS})


@dataclass(frozen=True)
class OptimizationPlan:
    entries: tuple[PlanEntry, ...]
    hardware: HardwareSpec
    model_name: str = "model"

    @property
    def covered_fraction(self) -> float:
        return math.fsum(e.f for e in self.entries)


def _supported(kt: KernelType | None) -> bool:
    return kt in EXECUTABLE_TYPES


def build_plan(profile: Profile, min_fraction: float = DEFAULT_MIN_FRACTION) -> OptimizationPlan:
    """Merge supported entries by (type, shape, dtype), drop those below ``min_fraction``,
    and rank by descending f (ties by name)."""
    merged: dict[tuple, list] = {}
    for e in profile.entries:
        if not _supported(e.kernel_type):
            continue
        key = (e.kernel_type, e.shape, e.dtype)
        slot = merged.setdefault(key, [0.0, []])
        slot[0] += e.fraction
        slot[1].append(e.op_name)
    entries = []
    for (kt, shape, dtype), (f, names) in merged.items():
        if f < min_fraction:
            continue
        spec = KernelSpec.make(kt, shape, dtype)
        entries.append(PlanEntry(spec, min(f, 1.0), tuple(names)))
    if not entries:
        raise PlanError("no supported kernels at or above the minimum fraction; nothing to optimize")
    entries.sort(key=lambda e: (-e.f, e.spec.name))
    return OptimizationPlan(tuple(entries), profile.hardware, profile.model_name)


def render_plan(plan: OptimizationPlan, extra_speedups: Sequence[float] = ()) -> str:
    grid = list(WHAT_IF_SPEEDUPS) + [s for s in extra_speedups if s not in WHAT_IF_SPEEDUPS]
    head = f"{'rank':>4}  {'kernel':<36} {'f':>7}  " + "  ".join(f"S@{s:g}x".rjust(8) for s in grid)
    out = [f"plan for {plan.model_name} on {plan.hardware.name} "
           f"(covers {plan.covered_fraction:.1%} of profiled time)", head]
    for i, e in enumerate(plan.entries, 1):
        cells = "  ".join(f"{amdahl(e.f, s):8.4f}" for s in grid)
        out.append(f"{i:>4}  {e.spec.name:<36} {e.f:7.2%}  {cells}")
    return "\n".join(out) + "\n"


def _hw_field(hw: HardwareSpec) -> str:
    return (f"name={hw.name} peak_flops={hw.peak_flops!r} peak_bandwidth={hw.peak_bandwidth!r} "
            f"source={hw.source.value}")


def plan_text(plan: OptimizationPlan) -> str:
    cols = ["name", "kernel_type", "shape", "dtype", "f", "op_names"] + [f"S@{s:g}" for s in WHAT_IF_SPEEDUPS]
    out = [PLAN_MAGIC, f"# model: {plan.model_name}", f"# hardware: {_hw_field(plan.hardware)}",
           "# " + "\t".join(cols)]
    for e in plan.entries:
        row = [e.spec.name, e.spec.kernel_type.value, str(e.spec.primary_shape), e.spec.dtype.value,
               repr(e.f), ",".join(e.op_names) or "-"] + [repr(e.what_if[s]) for s in WHAT_IF_SPEEDUPS]
        out.append("\t".join(row))
    return "\n".join(out) + "\n"


def parse_plan(text: str, path=None) -> OptimizationPlan:
    lines = text.splitlines()
    if not lines or lines[0].strip() != PLAN_MAGIC:
        raise ParseError(f"expected header {PLAN_MAGIC!r}", path, 1)
    model, hw, entries = "model", None, []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.startswith("# model:"):
            model = line.split(":", 1)[1].strip()
        elif line.startswith("# hardware:"):
            hw = parse_hardware_field(line.split(":", 1)[1], path, lineno)
        elif not line.startswith("#"):
            cols = line.split("\t")
            if len(cols) < 6:
                raise ParseError("plan rows need at least 6 columns", path, lineno)
            try:
                kt = KernelType.parse(cols[1])
                spec = KernelSpec(cols[0], kt, WorkloadShape.parse(cols[2]), DType.parse(cols[3]))
                names = () if cols[5] == "-" else tuple(cols[5].split(","))
                entries.append(PlanEntry(spec, float(cols[4]), names))
            except ParseError:
                raise
            except Exception as exc:
                raise ParseError(str(exc), path, lineno) from None
    if hw is None:
        raise ParseError("plan lacks a '# hardware:' line", path)
    if not entries:
        raise ParseError("plan has no entries", path)
    return OptimizationPlan(tuple(entries), hw, model)


def write_plan(plan: OptimizationPlan, path: str | Path) -> None:
    Path(path).write_text(plan_text(plan))


def read_plan(path: str | Path) -> OptimizationPlan:
    return parse_plan(Path(path).read_text(), path)


# ---------------------------------------------------------------- workspaces

def spec_text(spec: KernelSpec, hardware: HardwareSpec | None = None, f: float | None = None,
              op_names: Sequence[str] = ()) -> str:
    kv = {"name": spec.name, "type": spec.kernel_type.value, "dtype": spec.dtype.value,
          "atol": repr(spec.tolerance.atol), "rtol": repr(spec.tolerance.rtol),
          "flops_primary": str(spec.flops), "bytes_primary": str(spec.bytes)}
    for prefix, shape in (("shape", spec.primary_shape), ("half", spec.half_shape), ("double", spec.double_shape)):
        for k, v in shape.items:
            kv[f"{prefix}.{k}"] = str(v)
    if f is not None:
        kv["f"] = repr(f)
    if op_names:
        kv["ops"] = ",".join(op_names)
    if hardware is not None:
        kv["hw.name"] = hardware.name
        kv["hw.peak_flops"] = repr(hardware.peak_flops)
        kv["hw.peak_bandwidth"] = repr(hardware.peak_bandwidth)
        kv["hw.source"] = hardware.source.value
    return "".join(f"{k}={kv[k]}\n" for k in sorted(kv))


@dataclass(frozen=True)
class SpecFile:
    spec: KernelSpec
    hardware: HardwareSpec | None
    f: float | None
    op_names: tuple[str, ...]


def _shape_from(kv: dict[str, str], prefix: str, kt: KernelType) -> WorkloadShape:
    # keys are stored sorted; the kernel type fixes the dimension order
    dims = {k.split(".", 1)[1]: int(v) for k, v in kv.items() if k.startswith(prefix + ".")}
    if set(dims) != set(kt.dims):
        raise ParseError(f"{prefix}.* keys {sorted(dims)} do not match {kt.value} dimensions {kt.dims}")
    return WorkloadShape.from_pairs((d, dims[d]) for d in kt.dims)


def parse_spec(text: str, path=None) -> SpecFile:
    kv = parse_key_values(text, path)
    try:
        kt = KernelType.parse(kv["type"])
        dtype = DType.parse(kv["dtype"])
        primary = _shape_from(kv, "shape", kt)
        half = _shape_from(kv, "half", kt) if any(k.startswith("half.") for k in kv) else None
        double = _shape_from(kv, "double", kt) if any(k.startswith("double.") for k in kv) else None
        tol = Tolerance(float(kv["atol"]), float(kv["rtol"])) if "atol" in kv else None
        spec = KernelSpec(kv.get("name") or f"{kt.value}_{primary.tag()}_{dtype.value}", kt, primary, dtype,
                          half, double, tol)
        hw = None
        if "hw.name" in kv:
            hw = parse_hardware_field(" ".join(f"{k[3:]}={kv[k]}" for k in
                                               ("hw.name", "hw.peak_flops", "hw.peak_bandwidth", "hw.source")
                                               if k in kv), path)
        f = float(kv["f"]) if "f" in kv else None
        ops = tuple(kv["ops"].split(",")) if kv.get("ops") else ()
    except KeyError as exc:
        raise ParseError(f"spec file is missing {exc}", path) from None
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(str(exc), path) from None
    return SpecFile(spec, hw, f, ops)


@dataclass(frozen=True)
class Workspace:
    path: Path
    spec: KernelSpec
    hardware: HardwareSpec | None = None
    f: float | None = None
    op_names: tuple[str, ...] = ()

    @property
    def spec_path(self) -> Path:
        return self.path / SPEC_FILE

    @property
    def config_path(self) -> Path:
        return self.path / CONFIG_FILE

    @property
    def ledger_path(self) -> Path:
        return self.path / LEDGER_FILE

    def read_config(self) -> CandidateConfig:
        return parse_config(self.config_path.read_text(), self.config_path)

    @property
    def baseline_throughput(self) -> float | None:
        if not self.ledger_path.exists():
            return None
        rows = [r for r in read_ledger(self.ledger_path) if r.iteration == 0 and r.throughput is not None]
        return rows[-1].throughput if rows else None


def open_workspace(path: str | Path) -> Workspace:
    path = Path(path)
    spec_path = path / SPEC_FILE
    if not spec_path.exists():
        raise ExtractionError(f"{path} is not a workspace (no {SPEC_FILE})")
    sf = parse_spec(spec_path.read_text(), spec_path)
    ws = Workspace(path, sf.spec, sf.hardware, sf.f, sf.op_names)
    cfg = ws.read_config()
    if cfg.kernel_type is not sf.spec.kernel_type:
        raise ExtractionError(f"{ws.config_path} configures {cfg.kernel_type.value}, spec is {sf.spec.kernel_type.value}")
    return ws


GITIGNORE = f"{LEDGER_FILE}\nreport*\n*.png\n"


def create_workspace(path: str | Path, spec: KernelSpec, hardware: HardwareSpec | None = None,
                     f: float | None = None, op_names: Sequence[str] = (),
                     config: CandidateConfig | None = None, force: bool = False) -> Workspace:
    path = Path(path)
    try:
        if path.exists() and any(path.iterdir()):
            if not force:
                raise ExtractionError(f"{path} already exists; pass force to overwrite")
            shutil.rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / SPEC_FILE).write_text(spec_text(spec, hardware, f, op_names))
        (path / CONFIG_FILE).write_text((config or default_config(spec.kernel_type)).serialize())
        (path / ".gitignore").write_text(GITIGNORE)
        new_ledger(path / LEDGER_FILE)
    except OSError as exc:
        raise ExtractionError(f"cannot write workspace {path}: {exc}") from exc
    return open_workspace(path)


def workspace_dirname(rank: int, spec: KernelSpec) -> str:
    return f"{rank:02d}_{spec.name}"


def extract_workspaces(plan: OptimizationPlan, out_dir: str | Path, force: bool = False) -> list[Workspace]:
    """One workspace per plan entry, in plan order, each holding the spec, the starter config
    and an empty ledger."""
    out_dir = Path(out_dir)
    targets = [out_dir / workspace_dirname(i, e.spec) for i, e in enumerate(plan.entries, 1)]
    if not force:
        taken = [t for t in targets if t.exists()]
        if taken:
            raise ExtractionError(f"{taken[0]} already exists; re-extract with force")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExtractionError(f"cannot create {out_dir}: {exc}") from exc
    return [create_workspace(t, e.spec, plan.hardware, e.f, e.op_names, force=force)
            for t, e in zip(targets, plan.entries)]


def list_workspaces(out_dir: str | Path) -> list[Workspace]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise ExtractionError(f"{out_dir} is not a directory")
    found = [open_workspace(p) for p in sorted(out_dir.iterdir()) if (p / SPEC_FILE).exists()]
    if not found:
        raise ExtractionError(f"no workspaces under {out_dir}")
    return found
