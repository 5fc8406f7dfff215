"""Multi-kernel sequencing, end-to-end verification and fast_p scoring."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from kernelloop.core import Tolerance, tolerance_for
from kernelloop.errors import (BaselineError, ContractError, ParseError, PlanError, ScoreError)
from kernelloop.harness import HarnessSettings, MeasureSettings, TimingBackend, trimmed_mean
from kernelloop.loop.engine import LoopResult, MoveOnCriteria, run_loop
from kernelloop.loop.mutators import Mutator
from kernelloop.loop.store import make_store
from kernelloop.planner import (OptimizationPlan, Workspace, compose_amdahl, create_workspace,
                                parse_spec)
from kernelloop.profiler import ModelDesc, ModelOp, op_kernel_type, op_runner
from kernelloop.zoo.buffers import compare
from kernelloop.zoo.inputs import make_inputs
from kernelloop.zoo.params import CandidateConfig
from kernelloop.zoo.reference import reference_execute
from kernelloop.zoo.variants import candidate_execute, default_config

log = logging.getLogger(__name__)

FAST_P_THRESHOLDS = (1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0)
SUMMARY_MAGIC = "# kernelloop-summary v1"
RESULTS_MAGIC = "# kernelloop-results v1"
RESULTS_HEADER = "problem\tcorrect\tspeedup"
SUMMARY_COLUMNS = ("rank", "kernel", "f", "baseline_throughput", "final_throughput", "s",
                   "experiments", "kept", "move_on_reason", "wall_seconds")

MutatorFactory = Callable[[Workspace], Mutator]


@dataclass(frozen=True)
class KernelSummary:
    name: str
    f: float
    baseline_throughput: float | None
    final_throughput: float | None
    s: float
    experiments: int
    kept: int
    move_on_reason: str
    wall_seconds: float = 0.0

    @property
    def contribution(self) -> float:
        """Runtime fraction removed by this kernel's speedup, f (1 - 1/s)."""
        return self.f * (1.0 - 1.0 / self.s)


@dataclass(frozen=True)
class RunSummary:
    model_name: str
    kernels: tuple[KernelSummary, ...]
    total_wall_seconds: float
    measured_S: float | None = None

    @property
    def projected_S(self) -> float:
        return compose_amdahl([k.f for k in self.kernels], [k.s for k in self.kernels])

    @property
    def unoptimized_fraction(self) -> float:
        return max(0.0, 1.0 - sum(k.f for k in self.kernels))

    def with_measured(self, measured_S: float) -> "RunSummary":
        return RunSummary(self.model_name, self.kernels, self.total_wall_seconds, measured_S)

    def render(self) -> str:
        lines = [f"optimization summary for {self.model_name}",
                 f"{'rank':>4}  {'kernel':<36} {'f':>8} {'s':>8} {'exps':>5} {'kept':>5}  reason"]
        for i, k in enumerate(self.kernels, 1):
            lines.append(f"{i:>4}  {k.name:<36} {k.f:>8.2%} {k.s:>8.4f} {k.experiments:>5} {k.kept:>5}  "
                         f"{k.move_on_reason}")
        lines.append(f"untouched fraction: {self.unoptimized_fraction:.2%}")
        lines.append(f"projected end-to-end speedup: {self.projected_S:.4f}")
        if self.measured_S is not None:
            lines.append(f"measured end-to-end speedup: {self.measured_S:.4f}")
        lines.append(f"total wall time: {self.total_wall_seconds:.1f} s")
        return "\n".join(lines) + "\n"

    def tsv(self) -> str:
        def num(x):
            return "-" if x is None else repr(float(x))

        rows = [SUMMARY_MAGIC, f"# model: {self.model_name}", "\t".join(SUMMARY_COLUMNS)]
        for i, k in enumerate(self.kernels, 1):
            rows.append("\t".join([str(i), k.name, repr(k.f), num(k.baseline_throughput),
                                   num(k.final_throughput), repr(k.s), str(k.experiments), str(k.kept),
                                   k.move_on_reason, repr(k.wall_seconds)]))
        rows.append(f"# projected_S: {self.projected_S!r}")
        rows.append(f"# measured_S: {num(self.measured_S)}")
        rows.append(f"# total_wall_seconds: {self.total_wall_seconds!r}")
        return "\n".join(rows) + "\n"


def parse_summary(text: str, path=None) -> RunSummary:
    lines = text.splitlines()
    if not lines or lines[0] != SUMMARY_MAGIC:
        raise ParseError("not a kernelloop summary", path, 1)
    model, measured, total, kernels = "", None, None, []
    for lineno, line in enumerate(lines[1:], 2):
        if line.startswith("# model:"):
            model = line.split(":", 1)[1].strip()
        elif line.startswith("# measured_S:"):
            v = line.split(":", 1)[1].strip()
            measured = None if v == "-" else float(v)
        elif line.startswith("# total_wall_seconds:"):
            total = float(line.split(":", 1)[1])
        elif line.startswith("#") or line == "\t".join(SUMMARY_COLUMNS) or not line.strip():
            continue
        else:
            c = line.split("\t")
            if len(c) != len(SUMMARY_COLUMNS):
                raise ParseError(f"expected {len(SUMMARY_COLUMNS)} columns", path, lineno)
            try:
                kernels.append(KernelSummary(c[1], float(c[2]), None if c[3] == "-" else float(c[3]),
                                             None if c[4] == "-" else float(c[4]), float(c[5]), int(c[6]),
                                             int(c[7]), c[8], float(c[9])))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    if total is None:
        total = sum(k.wall_seconds for k in kernels)
    return RunSummary(model, tuple(kernels), total, measured)


def write_summary(summary: RunSummary, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, tsv = out_dir / "summary.txt", out_dir / "summary.tsv"
    txt.write_text(summary.render())
    tsv.write_text(summary.tsv())
    return txt, tsv


def orchestrate(plan: OptimizationPlan, workspaces: Sequence[Workspace], criteria: MoveOnCriteria | None,
                mutator_factory: MutatorFactory, total_budget_seconds: float,
                measure_settings: MeasureSettings | None = None, harness_settings: HarnessSettings | None = None,
                store_kind: str = "git", backend: TimingBackend | None = None,
                max_iterations: int | None = None, report_dir: str | Path | None = None,
                clock: Callable[[], float] = time.monotonic) -> RunSummary:
    """Run the loop on each workspace in plan order, capping every kernel's time budget at
    whatever is left of ``total_budget_seconds``. The profile's fractions are used throughout."""
    if not plan.entries:
        raise PlanError("plan is empty")
    if len(workspaces) != len(plan.entries):
        raise ContractError(f"{len(plan.entries)} plan entries but {len(workspaces)} workspaces")
    criteria = criteria or MoveOnCriteria()
    start = clock()
    kernels = []
    for entry, ws in zip(plan.entries, workspaces):
        if ws.spec.kernel_type is not entry.spec.kernel_type or ws.spec.primary_shape != entry.spec.primary_shape:
            raise ContractError(f"workspace {ws.path} does not match plan entry {entry.spec.name}")
        remaining = total_budget_seconds - (clock() - start)
        if remaining <= 0:
            log.info("%s: no budget left, skipping", entry.spec.name)
            kernels.append(KernelSummary(entry.spec.name, entry.f, None, None, 1.0, 0, 0, "time"))
            continue
        k_start = clock()
        try:
            result: LoopResult = run_loop(ws, mutator_factory(ws), criteria.capped(remaining), measure_settings,
                                          harness_settings, make_store(store_kind, ws.path), backend,
                                          max_iterations, plan.hardware, clock)
        except BaselineError as exc:
            log.warning("skipping %s: %s", entry.spec.name, exc)
            kernels.append(KernelSummary(entry.spec.name, entry.f, None, None, 1.0, 0, 0, "baseline_failed",
                                         clock() - k_start))
            continue
        kernels.append(KernelSummary(entry.spec.name, entry.f, result.t_baseline, result.t_best, result.speedup,
                                     result.experiments, result.kept, result.reason, clock() - k_start))
        log.info("%s: s=%.4f after %d experiments (%s)", entry.spec.name, result.speedup,
                 result.experiments, result.reason)
    summary = RunSummary(plan.model_name, tuple(kernels), clock() - start)
    if report_dir is not None:
        write_summary(summary, report_dir)
    return summary


# ---------------------------------------------------------------- end-to-end verification

@dataclass(frozen=True)
class EndToEndResult:
    correct: bool
    measured_S: float
    reference_seconds: float
    optimized_seconds: float
    offending_op: str | None = None
    message: str = ""


def _assign_configs(model: ModelDesc, workspaces: Sequence[Workspace]) -> dict[str, tuple[CandidateConfig, Tolerance]]:
    names = {op.op_name for op in model.ops}
    assigned = {}
    for ws in workspaces:
        missing = [n for n in ws.op_names if n not in names]
        if missing:
            raise ContractError(f"workspace {ws.path} refers to ops not in {model.name}: {missing}")
        cfg = ws.read_config()
        for n in ws.op_names:
            assigned[n] = (cfg, ws.spec.tolerance)
    return assigned


def verify_end_to_end(model: ModelDesc, workspaces: Sequence[Workspace], iters: int = 5, warmup: int = 1,
                      backend: TimingBackend | None = None, trim_fraction: float = 0.10) -> EndToEndResult:
    """Run the model with starter configs and with each workspace's current config.

    Every optimized op's output is checked against the float64 reference at its spec
    tolerance; the first breach names the op. The speedup is reference time over optimized
    time, from per-op synthetic costs when ``backend`` has ``op_seconds``, otherwise from
    trimmed means of timed forwards."""
    assigned = _assign_configs(model, workspaces)
    types = {op.op_name: op_kernel_type(op) for op in model.ops}
    offending, message = None, ""
    for op in model.ops:
        if op.op_name not in assigned:
            continue
        cfg, tol = assigned[op.op_name]
        kt = types[op.op_name]
        if kt is not cfg.kernel_type:
            raise ContractError(f"op {op.op_name} is {kt}, workspace configures {cfg.kernel_type.value}")
        inputs = make_inputs(kt, op.shape, op.dtype)
        try:
            out = candidate_execute(cfg, inputs, op.dtype)
            cmp = compare(out, reference_execute(kt, inputs), tol or tolerance_for(op.dtype))
            ok, detail = cmp.ok, f"{cmp.kind}, max abs error {cmp.max_abs_error:.3g}"
        except Exception as exc:  # a crashing config is a correctness failure, not a crash of the check
            ok, detail = False, f"crash: {exc}"
        if not ok:
            offending, message = op.op_name, f"{op.op_name} ({cfg.describe()}): {detail}"
            break

    ref_cfg = {n: default_config(cfg.kernel_type) for n, (cfg, _) in assigned.items()}
    opt_cfg = {n: cfg for n, (cfg, _) in assigned.items()}
    if backend is not None and hasattr(backend, "op_seconds"):
        ref_t = sum(backend.op_seconds(op, ref_cfg.get(op.op_name)) * op.repeat for op in model.ops)
        opt_t = sum(backend.op_seconds(op, opt_cfg.get(op.op_name)) * op.repeat for op in model.ops)
    else:
        ref_t, opt_t = _timed_forwards(model, types, ref_cfg, opt_cfg, iters, warmup, trim_fraction)
    return EndToEndResult(offending is None, ref_t / opt_t, ref_t, opt_t, offending, message)


def _forward_fn(model: ModelDesc, types, configs):
    steps = []
    for op in model.ops:
        cfg = configs.get(op.op_name)
        if cfg is None:
            steps.append((op_runner(op, types[op.op_name]), op.repeat))
        else:
            inputs = make_inputs(cfg.kernel_type, op.shape, op.dtype)
            steps.append(((lambda c=cfg, x=inputs, d=op.dtype: candidate_execute(c, x, d)), op.repeat))

    def forward():
        for fn, repeat in steps:
            for _ in range(repeat):
                fn()
    return forward


def _timed_forwards(model, types, ref_cfg, opt_cfg, iters, warmup, trim_fraction):
    from kernelloop.harness import MEASURE_LOCK

    ref, opt = _forward_fn(model, types, ref_cfg), _forward_fn(model, types, opt_cfg)
    ref_s, opt_s = [], []
    with MEASURE_LOCK:
        for i in range(warmup + iters):
            # alternate the two runs so slow drift in machine speed hits both equally
            for fn, bucket in ((ref, ref_s), (opt, opt_s)):
                t0 = time.perf_counter()
                fn()
                if i >= warmup:
                    bucket.append(time.perf_counter() - t0)
    return trimmed_mean(ref_s, trim_fraction), trimmed_mean(opt_s, trim_fraction)


# ---------------------------------------------------------------- fast_p scoring

@dataclass(frozen=True)
class ScoreResult:
    problems: int
    fractions: dict[float, float] = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [f"fast_{p:g}\t{self.fractions[p]:.4f}" for p in sorted(self.fractions)]


def fast_p(results: Sequence[tuple[bool, float]], p: float) -> float:
    """Fraction of problems solved correctly with speedup of at least ``p``."""
    if not results:
        raise ScoreError("fast_p of an empty result set is undefined")
    if not p >= 1:
        raise ScoreError(f"threshold must be >= 1, got {p}")
    return sum(1 for ok, s in results if ok and s >= p) / len(results)


def score(results: Sequence[tuple[bool, float]], thresholds: Sequence[float] = FAST_P_THRESHOLDS) -> ScoreResult:
    return ScoreResult(len(results), {p: fast_p(results, p) for p in thresholds})


def results_text(rows: Sequence[tuple[str, bool, float]]) -> str:
    out = [RESULTS_MAGIC, RESULTS_HEADER]
    out += [f"{name}\t{'true' if ok else 'false'}\t{s!r}" for name, ok, s in rows]
    return "\n".join(out) + "\n"


def parse_results(text: str, path=None) -> list[tuple[str, bool, float]]:
    lines = text.splitlines()
    if len(lines) < 2 or lines[0] != RESULTS_MAGIC or lines[1] != RESULTS_HEADER:
        raise ParseError(f"expected '{RESULTS_MAGIC}' then '{RESULTS_HEADER}'", path, 1)
    rows = []
    for lineno, line in enumerate(lines[2:], 3):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[1] not in ("true", "false"):
            raise ParseError("rows are: problem, true|false, speedup", path, lineno)
        try:
            s = float(cols[2])
        except ValueError:
            raise ParseError(f"bad speedup {cols[2]!r}", path, lineno) from None
        if not (math.isfinite(s) and s >= 0):
            raise ParseError(f"speedup must be finite and non-negative, got {cols[2]}", path, lineno)
        rows.append((cols[0], cols[1] == "true", s))
    return rows


def run_problem_set(problem_dir: str | Path, work_dir: str | Path, criteria: MoveOnCriteria | None,
                    mutator_factory: MutatorFactory, measure_settings: MeasureSettings | None = None,
                    harness_settings: HarnessSettings | None = None, store_kind: str = "git",
                    backend: TimingBackend | None = None, max_iterations: int | None = None,
                    force: bool = False) -> list[tuple[str, bool, float]]:
    """Optimize every ``*.cfg`` spec in ``problem_dir`` from its starter config.

    A problem whose starter fails the harness scores (false, 0)."""
    files = sorted(Path(problem_dir).glob("*.cfg"))
    if not files:
        raise PlanError(f"no *.cfg problem specs in {problem_dir}")
    rows = []
    for f in files:
        sf = parse_spec(f.read_text(), f)
        ws = create_workspace(Path(work_dir) / f.stem, sf.spec, sf.hardware, force=force)
        try:
            r = run_loop(ws, mutator_factory(ws), criteria, measure_settings, harness_settings,
                         make_store(store_kind, ws.path), backend, max_iterations, sf.hardware)
            rows.append((f.stem, True, r.speedup))
        except BaselineError as exc:
            log.warning("%s: %s", f.stem, exc)
            rows.append((f.stem, False, 0.0))
    return rows


__all__ = [
    "FAST_P_THRESHOLDS", "KernelSummary", "RunSummary", "EndToEndResult", "ScoreResult", "orchestrate",
    "verify_end_to_end", "fast_p", "score", "results_text", "parse_results", "run_problem_set",
    "write_summary", "parse_summary", "ModelOp",
]
