"""Run a declared model on the reference zoo, time each op, classify it and attach hardware peaks."""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from kernelloop.core import DType, HardwareSource, HardwareSpec, KernelType, WorkloadShape, check_shape
from kernelloop.errors import LookupFailure, ParseError, ProfilingError
from kernelloop.zoo.inputs import make_inputs
from kernelloop.zoo.reference import reference_execute

MODEL_MAGIC = "# kernelloop-model v1"
PROFILE_MAGIC = "# kernelloop-profile v1"
UNKNOWN = "unknown"


# ---------------------------------------------------------------- model description

@dataclass(frozen=True)
class ModelOp:
    op_name: str
    kernel_type_hint: KernelType | None
    shape: WorkloadShape
    dtype: DType
    repeat: int = 1
    cost: float | None = None  # synthetic seconds per call, only read by the simulated backend

    def __post_init__(self):
        if self.repeat < 1:
            raise ProfilingError(f"op {self.op_name}: repeat must be >= 1")
        if self.cost is not None and not self.cost > 0:
            raise ProfilingError(f"op {self.op_name}: cost must be positive")
        if self.kernel_type_hint is not None:
            check_shape(self.kernel_type_hint, self.shape)


@dataclass(frozen=True)
class ModelDesc:
    name: str
    ops: tuple[ModelOp, ...]

    def __post_init__(self):
        if not self.ops:
            raise ProfilingError(f"model {self.name} has no ops")
        names = [op.op_name for op in self.ops]
        if len(set(names)) != len(names):
            raise ProfilingError(f"model {self.name} repeats an op name")


def _header_fields(lines: list[str]) -> dict[str, str]:
    out = {}
    for line in lines:
        if line.startswith("# ") and ":" in line:
            key, value = line[2:].split(":", 1)
            out[key.strip()] = value.strip()
    return out


def parse_model(text: str, path=None) -> ModelDesc:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        raise ParseError(f"expected header {MODEL_MAGIC!r}", path, 1)
    meta = _header_fields([ln for ln in lines if ln.startswith("#")])
    ops = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (5, 6):
            raise ParseError("model rows need op_name, hint, shape, dtype, repeat[, cost]", path, lineno)
        try:
            hint = None if cols[1] in ("-", "") else KernelType.parse(cols[1])
            cost = float(cols[5]) if len(cols) == 6 and cols[5] not in ("-", "") else None
            ops.append(ModelOp(cols[0], hint, WorkloadShape.parse(cols[2]), DType.parse(cols[3]),
                               int(cols[4]), cost))
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(str(exc), path, lineno) from None
    if not ops:
        raise ParseError("model has no ops", path)
    return ModelDesc(meta.get("model", Path(str(path)).stem if path else "model"), tuple(ops))


def model_text(model: ModelDesc) -> str:
    out = [MODEL_MAGIC, f"# model: {model.name}", "# op_name\thint\tshape\tdtype\trepeat\tcost"]
    for op in model.ops:
        hint = op.kernel_type_hint.value if op.kernel_type_hint else "-"
        cost = repr(op.cost) if op.cost is not None else "-"
        out.append("\t".join([op.op_name, hint, str(op.shape), op.dtype.value, str(op.repeat), cost]))
    return "\n".join(out) + "\n"


def fixture_models() -> list[str]:
    folder = resources.files("kernelloop.data").joinpath("models")
    return sorted(p.name[: -len(".model")] for p in folder.iterdir() if p.name.endswith(".model"))


def load_model(source: str | Path) -> ModelDesc:
    """Load a model file, or a shipped fixture by bare name (e.g. ``gpt2like``)."""
    path = Path(source)
    if path.exists():
        return parse_model(path.read_text(), path)
    name = str(source)
    if name in fixture_models():
        text = resources.files("kernelloop.data").joinpath("models", f"{name}.model").read_text()
        return parse_model(text, f"{name}.model")
    raise LookupFailure(f"no model file or fixture named {name!r} (fixtures: {', '.join(fixture_models())})")


# ---------------------------------------------------------------- classification

@dataclass(frozen=True)
class Rule:
    pattern: re.Pattern
    kernel_type: KernelType | None  # None pins matching names to unknown


def _rule(pattern: str, kt: KernelType | None) -> Rule:
    return Rule(re.compile(pattern, re.IGNORECASE), kt)


# first match wins, so the more specific families come before the ones they contain
DEFAULT_RULES: tuple[Rule, ...] = (
    _rule(r"nccl|all_?reduce|all_?gather|reduce_?scatter|memcpy|memset", None),
    _rule(r"flash|fmha|sdpa|scaled_dot_product|attention", KernelType.FLASH_ATTN),
    _rule(r"fused_mlp|swiglu|geglu|mlp_fused|gated_mlp", KernelType.FUSED_MLP),
    _rule(r"cross_?entropy|nll_loss|xent", KernelType.CROSS_ENTROPY),
    _rule(r"rotary|rope", KernelType.ROTARY_EMB),
    _rule(r"rms", KernelType.RMSNORM),
    _rule(r"layer_?norm|ln_fwd|ln_bwd", KernelType.LAYERNORM),
    _rule(r"softmax", KernelType.SOFTMAX),
    _rule(r"gemm|gemv|cutlass|xmma|wgmma|cublas|matmul|s16816|h1688|(^|[^a-z])(add|b|baddb)?mm([^a-z]|$)|linear",
          KernelType.MATMUL),
    _rule(r"reduce|reduction|(^|[_:])sum(_|$)", KernelType.REDUCE),
)


def load_rules(path: str | Path) -> list[Rule]:
    """Read extra rules: one ``<regex>\\t<kernel_type or unknown>`` per line, ``#`` comments allowed."""
    rules = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise ParseError("rule lines are <regex><TAB><kernel_type>", path, lineno)
        try:
            kt = None if cols[1].strip() == UNKNOWN else KernelType.parse(cols[1])
            rules.append(_rule(cols[0], kt))
        except (re.error, ValueError) as exc:
            raise ParseError(str(exc), path, lineno) from None
    return rules


def classify_kernel_name(name: str, rules: Sequence[Rule] | None = None) -> KernelType | None:
    """Map a kernel or op name to a kernel type; None means unknown. Extra ``rules`` are tried
    before the defaults."""
    for rule in list(rules or ()) + list(DEFAULT_RULES):
        if rule.pattern.search(name):
            return rule.kernel_type
    return None


def name_corpus() -> list[tuple[str, str]]:
    """Shipped corpus of real-world kernel names with their intended type (or ``unknown``)."""
    text = resources.files("kernelloop.data").joinpath("kernel_names.txt").read_text()
    out = []
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            name, expected = line.rsplit("\t", 1)
            out.append((name, expected))
    return out


def op_kernel_type(op: ModelOp, rules: Sequence[Rule] | None = None) -> KernelType | None:
    """The op's hint if present, else the first matching rule whose kernel type fits the op's shape."""
    if op.kernel_type_hint is not None:
        return op.kernel_type_hint
    for rule in list(rules or ()) + list(DEFAULT_RULES):
        if not rule.pattern.search(op.op_name):
            continue
        if rule.kernel_type is None:
            return None
        try:
            check_shape(rule.kernel_type, op.shape)
        except Exception:
            continue
        return rule.kernel_type
    return None


# ---------------------------------------------------------------- hardware

def hardware_db() -> dict[str, HardwareSpec]:
    text = resources.files("kernelloop.data").joinpath("hardware.tsv").read_text()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        try:
            out[cols[0]] = HardwareSpec(cols[0], float(cols[1]), float(cols[2]), HardwareSource.STATIC_DB)
        except (IndexError, ValueError) as exc:
            raise ParseError(str(exc), "hardware.tsv", lineno) from None
    return out


def _best_of(fn, runs: int) -> float:
    best = math.inf
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def calibrate_hardware(copy_mib: int = 64, runs: int = 5) -> HardwareSpec:
    """Estimate peaks on this machine: streaming-copy bandwidth and the best matmul rate seen."""
    from kernelloop.harness import MEASURE_LOCK
    from kernelloop.zoo.params import CandidateConfig
    from kernelloop.zoo.variants import candidate_execute

    with MEASURE_LOCK:
        src = np.ones(copy_mib * (1 << 20) // 8)
        dst = np.empty_like(src)
        t = _best_of(lambda: np.copyto(dst, src), runs)
        bandwidth = 2 * src.nbytes / t  # read + write
        best_flops = 0.0
        rng = np.random.default_rng(0)
        for n in (256, 512, 1024):
            a = rng.standard_normal((n, n)).astype(np.float32)
            t = _best_of(lambda: a @ a, 3)
            best_flops = max(best_flops, 2 * n ** 3 / t)
        inputs = make_inputs(KernelType.MATMUL, WorkloadShape.of(M=512, N=512, K=512), DType.FP32)
        for tile in (64, 128, 256):
            cfg = CandidateConfig.make(KernelType.MATMUL, "tiled", {
                "tile_m": tile, "tile_n": tile, "tile_k": tile, "accum_precision": "same", "worker_count": 1})
            t = _best_of(lambda: candidate_execute(cfg, inputs, DType.FP32), 3)
            best_flops = max(best_flops, 2 * 512 ** 3 / t)
    return HardwareSpec("calibrated-cpu", best_flops, bandwidth, HardwareSource.CALIBRATED)


def detect_hardware(mode: str = "static", name: str | None = None) -> HardwareSpec:
    """``static`` looks ``name`` up in the shipped table; ``calibrate`` measures this machine."""
    if mode == "calibrate":
        return calibrate_hardware()
    if mode != "static":
        raise LookupFailure(f"unknown hardware mode {mode!r}")
    db = hardware_db()
    if name not in db:
        raise LookupFailure(f"hardware {name!r} not in database ({', '.join(db)})")
    return db[name]


def resolve_hardware(text: str) -> HardwareSpec:
    """CLI helper: ``calibrate`` or a database name."""
    return detect_hardware("calibrate") if text == "calibrate" else detect_hardware("static", text)


# ---------------------------------------------------------------- profiles

@dataclass(frozen=True)
class ProfileEntry:
    op_name: str
    kernel_type: KernelType | None
    shape: WorkloadShape
    dtype: DType
    total_seconds: float
    fraction: float


@dataclass(frozen=True)
class Profile:
    model_name: str
    hardware: HardwareSpec
    entries: tuple[ProfileEntry, ...]
    warmup_iters: int
    profile_iters: int

    def __post_init__(self):
        if not self.entries:
            raise ProfilingError("profile has no entries")
        if any(e.total_seconds < 0 for e in self.entries):
            raise ProfilingError("negative op time")
        total = math.fsum(e.fraction for e in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ProfilingError(f"fractions sum to {total}, not 1")

    @property
    def total_seconds(self) -> float:
        return math.fsum(e.total_seconds for e in self.entries)

    def fraction_of(self, kernel_type: KernelType | None) -> float:
        return math.fsum(e.fraction for e in self.entries if e.kernel_type == kernel_type)


def _fractions(times: Sequence[float]) -> list[float]:
    total = math.fsum(times)
    if total <= 0:
        return [1.0 / len(times)] * len(times)
    return [t / total for t in times]


class OpTimer(Protocol):
    def op_seconds(self, op: ModelOp, config) -> float:
        ...


def _generic_inputs(op: ModelOp) -> np.ndarray:
    rng = np.random.default_rng(0)
    return rng.standard_normal(op.shape.numel())


def op_runner(op: ModelOp, kernel_type: KernelType | None):
    """A zero-argument callable executing one op on the reference zoo (tanh for unclassified ops)."""
    if kernel_type is None:
        x = _generic_inputs(op)
        return lambda: np.tanh(x)
    inputs = make_inputs(kernel_type, op.shape, op.dtype)
    return lambda: reference_execute(kernel_type, inputs)


def profile(model: ModelDesc, warmup: int = 5, iters: int = 10, hardware: HardwareSpec | None = None,
            rules: Sequence[Rule] | None = None, timer: OpTimer | None = None) -> Profile:
    """Warm up, then time ``iters`` forwards op by op with the monotonic clock.

    When ``timer`` is given (the simulated backend), its per-call costs replace
    real execution."""
    if iters < 1 or warmup < 0:
        raise ProfilingError("need iters >= 1 and warmup >= 0")
    from kernelloop.harness import MEASURE_LOCK

    hardware = hardware or detect_hardware("static", "H100")
    types = [op_kernel_type(op, rules) for op in model.ops]
    totals = [0.0] * len(model.ops)
    if timer is not None:
        for i, op in enumerate(model.ops):
            totals[i] = timer.op_seconds(op, None) * op.repeat * iters
    else:
        try:
            runners = [op_runner(op, kt) for op, kt in zip(model.ops, types)]
        except Exception as exc:
            raise ProfilingError(f"could not prepare inputs: {exc}") from exc
        with MEASURE_LOCK:
            for it in range(warmup + iters):
                for i, (op, run) in enumerate(zip(model.ops, runners)):
                    for _ in range(op.repeat):
                        t0 = time.perf_counter()
                        try:
                            run()
                        except Exception as exc:
                            raise ProfilingError(f"op {op.op_name} failed: {exc}") from exc
                        if it >= warmup:
                            totals[i] += time.perf_counter() - t0
    fracs = _fractions(totals)
    entries = tuple(ProfileEntry(op.op_name, kt, op.shape, op.dtype, t, f)
                    for op, kt, t, f in zip(model.ops, types, totals, fracs))
    return Profile(model.name, hardware, entries, warmup, iters)


def _hardware_line(hw: HardwareSpec) -> str:
    return (f"# hardware: name={hw.name} peak_flops={hw.peak_flops!r} "
            f"peak_bandwidth={hw.peak_bandwidth!r} source={hw.source.value}")


def parse_hardware_field(value: str, path=None, lineno=None) -> HardwareSpec:
    """Either a bare database name or ``name=.. peak_flops=.. peak_bandwidth=.. [source=..]``."""
    if "=" not in value:
        return detect_hardware("static", value.strip())
    try:
        kv = dict(part.split("=", 1) for part in value.split())
        return HardwareSpec(kv["name"], float(kv["peak_flops"]), float(kv["peak_bandwidth"]),
                            HardwareSource(kv.get("source", "static_db")))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad hardware field: {exc}", path, lineno) from None


def profile_text(prof: Profile) -> str:
    out = [PROFILE_MAGIC, f"# model: {prof.model_name}", _hardware_line(prof.hardware),
           f"# iters: warmup={prof.warmup_iters} profile={prof.profile_iters}",
           "# op_name\tkernel_type\tshape\tdtype\ttotal_seconds\tfraction"]
    for e in prof.entries:
        kt = e.kernel_type.value if e.kernel_type else UNKNOWN
        out.append("\t".join([e.op_name, kt, str(e.shape), e.dtype.value, repr(e.total_seconds), repr(e.fraction)]))
    return "\n".join(out) + "\n"


def export_profile(prof: Profile, path: str | Path) -> None:
    Path(path).write_text(profile_text(prof))


def parse_profile(text: str, path=None) -> Profile:
    lines = text.splitlines()
    if not lines or lines[0].strip() != PROFILE_MAGIC:
        raise ParseError(f"expected header {PROFILE_MAGIC!r}", path, 1)
    model_name, hw, warmup, iters = "model", None, 0, 0
    rows = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# model:"):
                model_name = line.split(":", 1)[1].strip()
            elif line.startswith("# hardware:"):
                hw = parse_hardware_field(line.split(":", 1)[1], path, lineno)
            elif line.startswith("# iters:"):
                try:
                    kv = dict(p.split("=", 1) for p in line.split(":", 1)[1].split())
                    warmup, iters = int(kv["warmup"]), int(kv["profile"])
                except (KeyError, ValueError):
                    raise ParseError("bad iters line", path, lineno) from None
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise ParseError(f"expected 6 tab-separated columns, got {len(cols)}", path, lineno)
        try:
            kt = None if cols[1] == UNKNOWN else KernelType.parse(cols[1])
            shape = WorkloadShape.parse(cols[2])
            if kt is not None:
                check_shape(kt, shape)
            secs, frac = float(cols[4]), float(cols[5])
            if secs < 0 or frac < 0 or not (math.isfinite(secs) and math.isfinite(frac)):
                raise ValueError("times and fractions must be finite and non-negative")
            rows.append((cols[0], kt, shape, DType.parse(cols[3]), secs, frac))
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(str(exc), path, lineno) from None
    if not rows:
        raise ParseError("profile has no entries", path)
    if hw is None:
        raise ParseError("profile lacks a '# hardware:' line", path)
    fracs = [r[5] for r in rows]
    total = math.fsum(fracs)
    if total <= 0:
        fracs = _fractions([r[4] for r in rows])
    elif abs(total - 1.0) > 1e-12:
        fracs = [f / total for f in fracs]
    entries = tuple(ProfileEntry(*r[:5], f) for r, f in zip(rows, fracs))
    return Profile(model_name, hw, entries, warmup, iters)


def import_profile(path: str | Path) -> Profile:
    return parse_profile(Path(path).read_text(), path)


def summarize(prof: Profile) -> str:
    out = [f"model {prof.model_name}  hardware {prof.hardware.name}  total {prof.total_seconds:.4g} s"]
    for e in sorted(prof.entries, key=lambda e: -e.fraction):
        kt = e.kernel_type.value if e.kernel_type else UNKNOWN
        out.append(f"  {e.fraction:7.2%}  {kt:<14} {e.op_name}  {e.shape} {e.dtype.value}")
    return "\n".join(out) + "\n"


def corpus_accuracy(pairs: Iterable[tuple[str, str]], rules: Sequence[Rule] | None = None) -> float:
    pairs = list(pairs)
    hits = 0
    for name, expected in pairs:
        kt = classify_kernel_name(name, rules)
        hits += (kt.value if kt else UNKNOWN) == expected
    return hits / len(pairs)


__all__ = [
    "ModelOp", "ModelDesc", "parse_model", "model_text", "load_model", "fixture_models", "Rule",
    "DEFAULT_RULES", "load_rules", "classify_kernel_name", "name_corpus", "op_kernel_type",
    "hardware_db", "calibrate_hardware", "detect_hardware", "resolve_hardware", "ProfileEntry",
    "Profile", "profile", "profile_text", "export_profile", "parse_profile", "import_profile",
    "summarize", "corpus_accuracy", "op_runner",
]
