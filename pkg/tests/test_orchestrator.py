import itertools
import random

import pytest
from hypothesis import given, strategies as st

from conftest import FAST_HARNESS, FAST_MEASURE
from kernelloop.core import DType, KernelType, WorkloadShape
from kernelloop.errors import ContractError, ParseError, PlanError, ScoreError
from kernelloop.loop import MoveOnCriteria, ScriptedMutator
from kernelloop.orchestrator import (FAST_P_THRESHOLDS, KernelSummary, RunSummary, fast_p, orchestrate,
                                     parse_results, parse_summary, results_text, run_problem_set, score,
                                     verify_end_to_end, write_summary)
from kernelloop.planner import build_plan, compose_amdahl, extract_workspaces, spec_text
from kernelloop.profiler import ModelDesc, ModelOp, profile
from kernelloop.simulated import SimulatedTiming
from kernelloop.zoo import default_config

MM_SHAPE = WorkloadShape.of(M=64, N=64, K=64)
RMS_SHAPE = WorkloadShape.of(M=64, N=256)


def three_op_model():
    return ModelDesc("toy", (
        ModelOp("proj", KernelType.MATMUL, MM_SHAPE, DType.FP32, cost=0.62),
        ModelOp("norm", KernelType.RMSNORM, RMS_SHAPE, DType.FP32, cost=0.05),
        ModelOp("gelu", None, WorkloadShape.of(T=64, F=256), DType.FP32, cost=0.33),
    ))


def _prepared(tmp_path, model=None):
    model = model or three_op_model()
    backend = SimulatedTiming()
    plan = build_plan(profile(model, 0, 1, timer=backend))
    return model, plan, extract_workspaces(plan, tmp_path / "ws"), backend


def test_plan_from_costs_is_ranked(tmp_path):
    _, plan, wss, _ = _prepared(tmp_path)
    assert [e.spec.kernel_type for e in plan.entries] == [KernelType.MATMUL, KernelType.RMSNORM]
    assert [e.f for e in plan.entries] == pytest.approx([0.62, 0.05], abs=1e-12)
    assert [w.path.name[:2] for w in wss] == ["01", "02"]


def test_orchestrate_composes_forced_speedups(tmp_path):
    model, plan, wss, backend = _prepared(tmp_path)
    mm = default_config(KernelType.MATMUL).with_params(tile_k=64)
    rms = default_config(KernelType.RMSNORM).with_params(vector_width=8)
    backend.speeds = {mm.digest(): 1.3, rms.digest(): 5.29}
    scripts = {KernelType.MATMUL: [mm], KernelType.RMSNORM: [rms]}
    summary = orchestrate(plan, wss, None, lambda ws: ScriptedMutator(scripts[ws.spec.kernel_type]), 3600,
                          FAST_MEASURE, FAST_HARNESS, "memory", backend, report_dir=tmp_path / "ws")
    assert [k.s for k in summary.kernels] == pytest.approx([1.3, 5.29], rel=1e-12)
    assert [k.move_on_reason for k in summary.kernels] == ["exhausted", "speedup"]
    oracle = 1.0 / (0.62 / 1.3 + 0.05 / 5.29 + 0.33)
    assert summary.projected_S == pytest.approx(oracle, abs=1e-9)
    assert summary.kernels[0].contribution > summary.kernels[1].contribution
    assert summary.unoptimized_fraction == pytest.approx(0.33)

    e2e = verify_end_to_end(model, wss, backend=backend)
    assert e2e.correct and e2e.offending_op is None
    assert e2e.measured_S == pytest.approx(summary.projected_S, abs=1e-9)

    text = (tmp_path / "ws" / "summary.tsv").read_text()
    back = parse_summary(text)
    assert back.projected_S == pytest.approx(summary.projected_S, abs=1e-12)
    assert [k.name for k in back.kernels] == [k.name for k in summary.kernels]
    assert (tmp_path / "ws" / "summary.txt").exists()


def test_budget_runs_out_for_later_kernels(tmp_path):
    _, plan, wss, backend = _prepared(tmp_path)
    ticks = itertools.count(0.0, 50.0)
    summary = orchestrate(plan, wss, None, lambda ws: ScriptedMutator([]), 120, FAST_MEASURE, FAST_HARNESS,
                          "memory", backend, clock=lambda: next(ticks))
    assert summary.kernels[-1].move_on_reason == "time"
    assert summary.kernels[-1].s == 1.0 and summary.kernels[-1].experiments == 0


def test_baseline_failure_is_recorded_not_raised(tmp_path):
    _, plan, wss, backend = _prepared(tmp_path)
    wss[1].config_path.write_text(default_config(KernelType.RMSNORM, "broken").serialize())
    summary = orchestrate(plan, wss, None, lambda ws: ScriptedMutator([]), 3600, FAST_MEASURE, FAST_HARNESS,
                          "memory", backend)
    assert summary.kernels[1].move_on_reason == "baseline_failed"
    assert summary.kernels[1].s == 1.0


def test_orchestrate_rejects_mismatched_workspaces(tmp_path):
    _, plan, wss, backend = _prepared(tmp_path)
    with pytest.raises(ContractError):
        orchestrate(plan, wss[::-1], None, lambda ws: ScriptedMutator([]), 10, FAST_MEASURE, FAST_HARNESS,
                    "memory", backend)
    with pytest.raises(ContractError):
        orchestrate(plan, wss[:1], None, lambda ws: ScriptedMutator([]), 10)


def test_verify_names_offending_op(tmp_path):
    model, _, wss, backend = _prepared(tmp_path)
    wss[1].config_path.write_text(default_config(KernelType.RMSNORM, "broken").serialize())
    r = verify_end_to_end(model, wss, backend=backend)
    assert not r.correct and r.offending_op == "norm"
    assert "norm" in r.message


def test_verify_with_wall_clock(tmp_path):
    model, _, wss, _ = _prepared(tmp_path)
    r = verify_end_to_end(model, wss, iters=2, warmup=0)
    assert r.correct and r.measured_S > 0 and r.reference_seconds > 0


def test_summary_matches_composition():
    ks = (KernelSummary("a", 0.5, 1.0, 2.0, 2.0, 3, 1, "speedup"),
          KernelSummary("b", 0.2, 1.0, 1.0, 1.0, 5, 0, "consecutive_reverts"))
    s = RunSummary("m", ks, 1.0)
    assert s.projected_S == pytest.approx(compose_amdahl([0.5, 0.2], [2.0, 1.0]))
    assert ks[0].contribution == pytest.approx(0.25)
    assert parse_summary(s.with_measured(1.3).tsv()).measured_S == 1.3
    with pytest.raises(ParseError):
        parse_summary("nonsense\n")


def test_write_summary_files(tmp_path):
    s = RunSummary("m", (KernelSummary("a", 0.5, 1.0, 2.0, 2.0, 3, 1, "speedup"),), 1.0)
    txt, tsv = write_summary(s, tmp_path)
    assert "projected" in txt.read_text().lower()
    assert parse_summary(tsv.read_text()) == s


# ---------------------------------------------------------------- fast_p

def brute_fast_p(results, p):
    count = 0
    for ok, s in results:
        if ok and s >= p:
            count += 1
    return count / len(results)


def test_fast_p_examples():
    rs = [(True, 1.0), (True, 2.5), (False, 9.0), (True, 0.5)]
    assert fast_p(rs, 1) == 0.5
    assert fast_p(rs, 2.5) == 0.25
    assert fast_p(rs, 5) == 0.0
    assert FAST_P_THRESHOLDS == (1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0)
    assert [l.split("\t")[0] for l in score(rs).lines()] == [
        "fast_1", "fast_1.5", "fast_2", "fast_2.5", "fast_3", "fast_4", "fast_5"]


def test_fast_p_errors():
    with pytest.raises(ScoreError):
        fast_p([], 1)
    with pytest.raises(ScoreError):
        fast_p([(True, 1.0)], 0.5)


@given(st.lists(st.tuples(st.booleans(), st.floats(0, 8, allow_nan=False)), min_size=1, max_size=40))
def test_fast_p_property(results):
    vals = [fast_p(results, p) for p in FAST_P_THRESHOLDS]
    assert vals == [brute_fast_p(results, p) for p in FAST_P_THRESHOLDS]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_results_round_trip():
    rows = [("a", True, 1.25), ("b", False, 0.0)]
    assert parse_results(results_text(rows)) == rows
    for bad in ["", "# kernelloop-results v1\nproblem\tcorrect\tspeedup\na\tyes\t1\n",
                "# kernelloop-results v1\nproblem\tcorrect\tspeedup\na\ttrue\tnan\n"]:
        with pytest.raises(ParseError):
            parse_results(bad)


def test_run_problem_set(tmp_path, rms_spec):
    probs = tmp_path / "problems"
    probs.mkdir()
    (probs / "rms.cfg").write_text(spec_text(rms_spec))
    fast = default_config(KernelType.RMSNORM).with_params(vector_width=8)
    backend = SimulatedTiming({fast.digest(): 1.6})
    rows = run_problem_set(probs, tmp_path / "work", None, lambda ws: ScriptedMutator([fast]), FAST_MEASURE,
                           FAST_HARNESS, "memory", backend)
    assert rows == [("rms", True, pytest.approx(1.6))]
    with pytest.raises(PlanError):
        run_problem_set(tmp_path / "work", tmp_path / "w2", None, None)
