"""The acceptance gate: one test per criterion, each also held to its runtime limit.

Run with ``pytest tests/test_acceptance.py -v``; a pass/fail table is printed at the end."""

import logging
import math
import subprocess
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from kernelloop.cli import main as cli
from kernelloop.core import (DType, HardwareSpec, KernelSpec, KernelType, Metric, WorkloadShape, bytes_of,
                             flops_of)
from kernelloop.harness import HarnessSettings, MeasureSettings, Stage, verify
from kernelloop.ledger import Decision, keep_chain_ok, read_ledger
from kernelloop.loop import (ExternalMutator, GitStore, MemoryStore, MoveOnCriteria, PlaybookMutator,
                             ScriptedMutator, run_loop, t_best_trace)
from kernelloop.loop.mutators import stub_command
from kernelloop.orchestrator import FAST_P_THRESHOLDS, fast_p, orchestrate, parse_summary, verify_end_to_end
from kernelloop.planner import amdahl, build_plan, create_workspace, extract_workspaces, read_plan
from kernelloop.profiler import ModelDesc, ModelOp, profile
from kernelloop.simulated import SimulatedTiming
from kernelloop.zoo import candidate_execute, default_config, make_inputs
from kernelloop.zoo.inputs import determinism_inputs
from kernelloop.zoo.params import parse_config
from kernelloop.zoo.sweeps import desk_shape, shape_sweep
from kernelloop.zoo.variants import STARTER_VARIANT, variants_for

FIXTURES = Path(__file__).parent / "fixtures"
SWEEP_DTYPES = (DType.FP32, DType.FP16, DType.BF16)
RMS_SPEC = KernelSpec.make("rmsnorm", {"M": 64, "N": 256}, "fp32")
K0 = default_config(KernelType.RMSNORM)


@contextmanager
def within(seconds):
    t0 = time.monotonic()
    yield
    elapsed = time.monotonic() - t0
    assert elapsed < seconds, f"took {elapsed:.1f} s, limit {seconds} s"


def _loop(ws, steps, speeds, criteria=None, store=None, **kw):
    return run_loop(ws, ScriptedMutator(steps), criteria, MeasureSettings(), HarnessSettings(),
                    store or MemoryStore(ws.path), SimulatedTiming({c.digest(): v for c, v in speeds.items()}), **kw)


# ---------------------------------------------------------------- 1

def test_c01_amdahl_exactness():
    with within(1.0):
        assert abs(amdahl(0.60, 1.5) - 1.25) <= 1e-12
        rng = np.random.default_rng(20240601)
        f = rng.uniform(0.0, 1.0, 10_000)
        s = rng.uniform(1.0, 100.0, 10_000)
        df = rng.uniform(0.0, 0.05, 10_000)
        ds = rng.uniform(0.0, 5.0, 10_000)
        for fi, si, dfi, dsi in zip(f, s, df, ds):
            S = amdahl(fi, si)
            assert 1.0 <= S <= si * (1 + 1e-12)
            if fi < 1.0:
                assert S <= 1.0 / (1.0 - fi) * (1 + 1e-12)
            assert amdahl(fi, si + dsi) >= S * (1 - 1e-12)
            assert amdahl(min(1.0, fi + dfi), si) >= S * (1 - 1e-12)


# ---------------------------------------------------------------- 2

def test_c02_throughput_table():
    with within(1.0):
        rows = [line.split("\t") for line in (FIXTURES / "throughput_table.tsv").read_text().splitlines()
                if line and not line.startswith("#")]
        assert len(rows) == 16
        for kernel, shape, dtype, elapsed_us, reported, unit in rows:
            kt, sh, dt = KernelType.parse(kernel), WorkloadShape.parse(shape), DType.parse(dtype)
            seconds = float(elapsed_us) * 1e-6
            if unit == "TF/s":
                assert kt.metric is Metric.TFLOPS
                got = flops_of(kt, sh) / seconds / 1e12
            else:
                assert unit == "GB/s" and kt.metric is Metric.GBPS
                got = bytes_of(kt, sh, dt) / seconds / 1e9
            assert abs(got / float(reported) - 1) <= 0.01, (kernel, shape, got, reported)


# ---------------------------------------------------------------- 3

CM_SHAPES = {
    KernelType.MATMUL: "M=256,N=256,K=256",
    KernelType.SOFTMAX: "M=512,N=1024",
    KernelType.LAYERNORM: "M=512,N=1024",
    KernelType.RMSNORM: "M=512,N=1024",
    KernelType.CROSS_ENTROPY: "M=256,V=4096",
    KernelType.ROTARY_EMB: "B=1,H=4,S=512,D=64",
    KernelType.REDUCE: "M=512,N=1024",
}


@pytest.mark.slow
def test_c03_harness_confusion_matrix():
    false_accepts, false_rejects, wrong_stage = [], [], []
    with within(300.0):
        assert set(CM_SHAPES) == set(STARTER_VARIANT)
        for kt, shape in CM_SHAPES.items():
            for dt in SWEEP_DTYPES:
                spec = KernelSpec.make(kt, WorkloadShape.parse(shape), dt)
                for v in variants_for(kt, include_fixtures=True):
                    report = verify(default_config(kt, v.name), spec)
                    tag = f"{kt.value}/{v.name}/{dt.value}"
                    if not v.is_fixture:
                        if not report.all_passed:
                            false_rejects.append((tag, report.failed_stage))
                    elif report.all_passed:
                        false_accepts.append(tag)
                    elif report.failed_stage.value != v.fixture_stage:
                        wrong_stage.append((tag, report.failed_stage.value, v.fixture_stage))
                    elif v.name == "masking_bug":
                        failure = report.stages[-1].first_failure
                        if "N=1023" not in failure.case:
                            wrong_stage.append((tag, failure.case, "N=1023"))
    assert not false_accepts and not false_rejects and not wrong_stage, (false_accepts, false_rejects, wrong_stage)
    stage_numbers = {s.value: i for i, s in enumerate(Stage, 1)}
    assert [stage_numbers[x] for x in ("smoke", "shape_sweep", "stability", "determinism", "edge_cases")] == \
        [1, 2, 3, 4, 5]


# ---------------------------------------------------------------- 4

def test_c04_loop_semantics(tmp_path):
    with within(60.0):
        ws = create_workspace(tmp_path / "seq", RMS_SPEC)
        up, down = K0.with_params(vector_width=8), K0.with_params(vector_width=2)
        tiny, broken = K0.with_params(vector_width=4), default_config(KernelType.RMSNORM, "broken")
        up2 = up.with_params(unroll=2)
        digests_after_revert = []

        class Spy(MemoryStore):
            def revert_last(self):
                super().revert_last()
                digests_after_revert.append(parse_config(ws.config_path.read_text()).digest())

        r = _loop(ws, [up, down, tiny, broken, up2], {up: 1.5, down: 1.2, tiny: 1.5 * 1.005, up2: 1.8},
                  store=Spy(ws.path))
        ledger = read_ledger(ws.ledger_path)
        assert [x.decision for x in ledger[1:]] == [Decision.KEEP] + [Decision.REVERT] * 3 + [Decision.KEEP]
        trace = t_best_trace(ledger)
        assert all(a <= b for a, b in zip(trace, trace[1:]))
        assert list(r.n_rev_trace) == [0, 1, 2, 3, 0]
        assert digests_after_revert == [up.digest()] * 3
        assert keep_chain_ok(ledger)

        worse = [K0.with_params(tile_m=t) for t in (8, 16, 64, 128, 256)] + [K0.with_params(unroll=2)]
        reasons = {}
        ws = create_workspace(tmp_path / "reverts", RMS_SPEC)
        reasons["reverts"] = _loop(ws, worse, {c: 0.5 for c in worse})
        assert reasons["reverts"].k_best == K0 and reasons["reverts"].n_rev_trace[-1] == 5

        ws = create_workspace(tmp_path / "peak", RMS_SPEC)
        reasons["peak"] = _loop(ws, [up, down], {up: 1.85}, MoveOnCriteria(speedup_target=10.0),
                                hw=HardwareSpec("toy", 1e15, 2e9))

        ws = create_workspace(tmp_path / "time", RMS_SPEC)
        ticks = iter(np.arange(0.0, 1e6, 1000.0))
        reasons["time"] = _loop(ws, worse, {c: 0.5 for c in worse}, MoveOnCriteria(max_consecutive_reverts=100, time_budget_seconds=2500.0),
                                clock=lambda: float(next(ticks)))

        ws = create_workspace(tmp_path / "speedup", RMS_SPEC)
        reasons["speedup"] = _loop(ws, [up, down], {up: 2.05})

    assert {k: v.reason for k, v in reasons.items()} == {
        "reverts": "consecutive_reverts", "peak": "peak", "time": "time", "speedup": "speedup"}


# ---------------------------------------------------------------- 5

def test_c05_version_store_fidelity(tmp_path):
    with within(60.0):
        ws = create_workspace(tmp_path / "ws", RMS_SPEC)
        grid = [K0.with_params(tile_m=m, tile_n=n) for m in (8, 16, 64, 128) for n in (8, 16, 32, 128, 256)]
        keep_at = {1, 4, 7, 10, 13, 16}
        speeds, best = {}, 1.0
        for i, cfg in enumerate(grid, 1):
            if i in keep_at:
                best *= 1.1
                speeds[cfg] = best
            else:
                speeds[cfg] = 0.5
        r = _loop(ws, grid, speeds, MoveOnCriteria(max_consecutive_reverts=100, speedup_target=100.0),
                  store=GitStore(ws.path))
        assert r.experiments == 20 and r.kept == 6
        messages = GitStore(ws.path).messages()
        assert messages == ["baseline"] + [f"iter {i}: scripted step {i}" for i in sorted(keep_at)]
        clone = tmp_path / "clone"
        subprocess.run(["git", "clone", "-q", str(ws.path), str(clone)], check=True)
        assert (clone / "candidate.cfg").read_bytes() == r.k_best.serialize().encode()
        assert parse_config((clone / "candidate.cfg").read_text()) == r.k_best


# ---------------------------------------------------------------- 6

class Recorder:
    def __init__(self, inner):
        self.inner, self.calls = inner, []

    def next(self, k_best, history, roofline):
        p = self.inner.next(k_best, history, roofline)
        self.calls.append((k_best, list(history), roofline, p))
        return p


@pytest.mark.slow
def test_c06_playbook_efficacy(tmp_path):
    with within(600.0):
        spec = KernelSpec.make("matmul", {"M": 512, "N": 512, "K": 512}, "fp32")
        ws = create_workspace(tmp_path / "ws", spec, config=default_config(KernelType.MATMUL, "naive"))
        rec = Recorder(PlaybookMutator())
        r = run_loop(ws, rec, MoveOnCriteria(max_consecutive_reverts=50, speedup_target=1e9,
                                             time_budget_seconds=540.0),
                     MeasureSettings(3, 30), HarnessSettings(), MemoryStore(ws.path), max_iterations=50)
        # the playbook may run out of untried neighbours before the cap
        assert r.reason in ("max_iterations", "exhausted") and 0 < r.experiments <= 50
        assert r.speedup >= 1.3, r.speedup
        # the proposal sequence is a pure function of what the mutator was shown
        replay = PlaybookMutator()
        for k_best, history, roofline, proposal in rec.calls:
            assert replay.next(k_best, history, roofline) == proposal


# ---------------------------------------------------------------- 7

def test_c07_determinism_stage():
    with within(60.0):
        for kt, variant in STARTER_VARIANT.items():
            cfg = default_config(kt, variant)
            for entry in shape_sweep(kt):
                shape = desk_shape(entry.shape, 8)
                for dt in SWEEP_DTYPES:
                    inputs = make_inputs(kt, shape, dt)
                    runs = {candidate_execute(cfg, inputs, dt).bits() for _ in range(3)}
                    assert len(runs) == 1, (kt, shape, dt)
        racy = default_config(KernelType.REDUCE, "racy")
        inputs = determinism_inputs(KernelType.REDUCE, WorkloadShape.of(M=64, N=256), DType.FP32)
        assert np.any(np.abs(inputs[0].data.ravel()) >= 1e8)
        outs = {candidate_execute(racy, inputs, DType.FP32).bits() for _ in range(3)}
        assert len(outs) > 1


# ---------------------------------------------------------------- 8

def test_c08_orchestrator_composition(tmp_path):
    with within(10.0):
        model = ModelDesc("three", (
            ModelOp("proj", KernelType.MATMUL, WorkloadShape.of(M=512, N=512, K=512), DType.FP32, cost=0.62),
            ModelOp("norm", KernelType.RMSNORM, WorkloadShape.of(M=512, N=1024), DType.FP32, cost=0.05),
            ModelOp("act", None, WorkloadShape.of(T=512, F=1024), DType.FP32, cost=0.33),
        ))
        backend = SimulatedTiming()
        plan = build_plan(profile(model, 0, 1, timer=backend))
        wss = extract_workspaces(plan, tmp_path / "ws")
        mm = default_config(KernelType.MATMUL).with_params(tile_k=64)
        rms = default_config(KernelType.RMSNORM).with_params(vector_width=8)
        backend.speeds = {mm.digest(): 1.3, rms.digest(): 5.29}
        steps = {KernelType.MATMUL: [mm], KernelType.RMSNORM: [rms]}
        summary = orchestrate(plan, wss, None, lambda ws: ScriptedMutator(steps[ws.spec.kernel_type]), 3600.0,
                              store_kind="memory", backend=backend)
        by_type = {wss[i].spec.kernel_type: k for i, k in enumerate(summary.kernels)}
        assert abs(by_type[KernelType.MATMUL].s - 1.3) < 1e-12
        assert abs(by_type[KernelType.RMSNORM].s - 5.29) < 1e-12
        hand = 1.0 / (0.62 / 1.3 + 0.05 / 5.29 + (1.0 - 0.62 - 0.05))
        assert abs(summary.projected_S - hand) <= 1e-9
        measured = verify_end_to_end(model, wss, backend=backend)
        assert measured.correct
        assert abs(measured.measured_S - summary.projected_S) <= 1e-9
        assert by_type[KernelType.MATMUL].contribution > by_type[KernelType.RMSNORM].contribution


# ---------------------------------------------------------------- 9

def test_c09_fast_p_oracle():
    with within(5.0):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            correct = rng.random(n) < 0.7
            speedups = rng.choice([rng.uniform(0, 6), 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0], n)
            results = list(zip(correct.tolist(), speedups.tolist()))
            values = [fast_p(results, p) for p in FAST_P_THRESHOLDS]
            for p, v in zip(FAST_P_THRESHOLDS, values):
                hits = 0
                for ok, s in results:
                    if ok and s >= p:
                        hits += 1
                assert v == hits / n
            assert all(a >= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- 10

@pytest.mark.slow
def test_c10_end_to_end_pipeline(tmp_path, capsys):
    with within(900.0):
        prof, plan_path, wsd = tmp_path / "profile.tsv", tmp_path / "plan.tsv", tmp_path / "ws"
        assert cli(["profile", "--model", "gpt2like", "--out", str(prof), "--warmup", "1", "--iters", "3"]) == 0
        assert cli(["plan", "--profile", str(prof), "--out", str(plan_path)]) == 0
        assert cli(["extract", "--plan", str(plan_path), "--out", str(wsd)]) == 0
        assert cli(["orchestrate", "--plan", str(plan_path), "--workspaces", str(wsd), "--budget-seconds", "600",
                    "--warmup", "3", "--iters", "20"]) == 0
        code = cli(["verify", "--model", "gpt2like", "--workspaces", str(wsd), "--iters", "5"])
        out = capsys.readouterr().out
    plan = read_plan(plan_path)
    fs = [e.f for e in plan.entries]
    assert fs == sorted(fs, reverse=True)
    assert plan.entries[0].spec.kernel_type is KernelType.MATMUL
    assert sum(e.f for e in plan.entries if e.spec.kernel_type is KernelType.MATMUL) > 0.5
    assert code == 0 and "correct: true" in out
    summary = parse_summary((wsd / "summary.tsv").read_text())
    assert summary.measured_S is not None and summary.measured_S >= 1.0, summary.measured_S


# ---------------------------------------------------------------- 11

def test_c11_external_mutator_protocol(tmp_path, caplog):
    outcomes = {}
    with within(180.0), caplog.at_level(logging.INFO, logger="kernelloop"):
        for stub in ("valid_proposal", "garbage", "timeout"):
            ws = create_workspace(tmp_path / stub, RMS_SPEC)
            caplog.clear()
            r = run_loop(ws, ExternalMutator(stub_command(stub), timeout=5.0), None, MeasureSettings(),
                         HarnessSettings(), MemoryStore(ws.path), SimulatedTiming(), max_iterations=1)
            row = read_ledger(ws.ledger_path)[1]
            outcomes[stub] = (r.experiments, row.failed_stage, row.description,
                              any("failed proposal" in m for m in caplog.messages))
    assert outcomes["valid_proposal"][:2] == (1, None)
    assert not outcomes["valid_proposal"][3]
    assert outcomes["garbage"][1] == "proposal" and outcomes["garbage"][3]
    assert outcomes["timeout"][1] == "proposal" and outcomes["timeout"][3]
    assert "timed out" in outcomes["timeout"][2]
