import itertools
import sys

import pytest

from conftest import FAST_HARNESS, FAST_MEASURE
from kernelloop.core import HardwareSpec, KernelSpec, KernelType, Regime, RooflineStatus
from kernelloop.errors import BaselineError, ContractError, MutatorError, ProposalError, StoreError
from kernelloop.ledger import Decision, ExperimentRecord, keep_chain_ok, read_ledger
from kernelloop.loop import (ExternalMutator, GitStore, LoopState, MemoryStore, MoveOnCriteria, PlaybookMutator,
                             Proposal, RandomMutator, ScriptedMutator, keep_decision, make_mutator, run_loop,
                             should_move_on, t_best_trace)
from kernelloop.loop.mutators import (build_request, parse_response, parse_sections, render_sections,
                                      stub_command)
from kernelloop.simulated import SimulatedTiming
from kernelloop.zoo import default_config, enumerate_params
from kernelloop.zoo.params import CandidateConfig

RMS = KernelType.RMSNORM
K0 = default_config(RMS)


def _run(ws, steps, speeds, criteria=None, store=None, **kw):
    kw.setdefault("harness_settings", FAST_HARNESS)
    return run_loop(ws, ScriptedMutator(steps), criteria, FAST_MEASURE, store=store or MemoryStore(ws.path),
                    backend=SimulatedTiming({k.digest(): v for k, v in speeds.items()}), **kw)


def _state(n_rev=0, t_best=1.0, t_baseline=1.0, started=0.0):
    return LoopState(K0, t_best, t_baseline, started, n_rev)


# ---------------------------------------------------------------- decisions

def test_keep_decision_examples():
    assert keep_decision(True, 1.02, 1.0) is Decision.KEEP
    assert keep_decision(True, 1.01, 1.0) is Decision.REVERT
    assert keep_decision(True, 1.005, 1.0) is Decision.REVERT
    assert keep_decision(False, 99.0, 1.0) is Decision.REVERT
    assert keep_decision(True, None, 1.0) is Decision.REVERT
    with pytest.raises(ContractError):
        keep_decision(True, 1.0, 0.0)


def test_should_move_on_examples():
    c = MoveOnCriteria()
    assert should_move_on(_state(n_rev=5), c, None, 0.0) == (True, "consecutive_reverts")
    assert should_move_on(_state(), c, RooflineStatus(1.0, Regime.MEMORY, 0.91), 0.0) == (True, "peak")
    assert should_move_on(_state(), c, None, 7200.0) == (True, "time")
    assert should_move_on(_state(t_best=2.0), c, None, 0.0) == (True, "speedup")
    assert should_move_on(_state(n_rev=4, t_best=1.9), c, RooflineStatus(1.0, Regime.MEMORY, 0.89), 7199.0) \
        == (False, None)


def test_should_move_on_precedence():
    everything = _state(n_rev=9, t_best=3.0)
    status = RooflineStatus(1.0, Regime.COMPUTE, 0.95)
    assert should_move_on(everything, MoveOnCriteria(), status, 1e9)[1] == "consecutive_reverts"
    everything.n_rev = 0
    assert should_move_on(everything, MoveOnCriteria(), status, 1e9)[1] == "peak"
    assert should_move_on(everything, MoveOnCriteria(), None, 1e9)[1] == "time"


def test_criteria_validation_and_cap():
    c = MoveOnCriteria()
    assert (c.max_consecutive_reverts, c.peak_fraction, c.time_budget_seconds, c.speedup_target) == (5, 0.9, 7200, 2)
    for bad in [dict(max_consecutive_reverts=0), dict(peak_fraction=1.5), dict(time_budget_seconds=0),
                dict(speedup_target=-1)]:
        with pytest.raises(ContractError):
            MoveOnCriteria(**bad)
    assert c.capped(10).time_budget_seconds == 10
    assert c.capped(1e9).time_budget_seconds == 7200


# ---------------------------------------------------------------- loop runs

def test_scripted_sequence(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    up = K0.with_params(vector_width=8)
    down = K0.with_params(vector_width=2)
    tiny = K0.with_params(vector_width=4)
    broken = default_config(RMS, "broken")
    up2 = up.with_params(unroll=2)
    speeds = {K0: 1.0, up: 1.5, down: 1.2, tiny: 1.5 * 1.005, up2: 1.8}

    class SpyStore(MemoryStore):
        after_revert = []

        def revert_last(self):
            super().revert_last()
            self.after_revert.append(CandidateConfig.digest(ws.read_config()))

    store = SpyStore(ws.path)
    r = _run(ws, [up, down, tiny, broken, up2], speeds, store=store)
    decisions = [x.decision.value for x in r.records[1:]]
    assert decisions == ["keep", "revert", "revert", "revert", "keep"]
    assert r.n_rev_trace == (0, 1, 2, 3, 0)
    assert store.after_revert == [up.digest()] * 3
    assert r.records[4].failed_stage == "smoke"
    trace = t_best_trace(r.records)
    assert trace == sorted(trace)
    assert r.k_best == up2 and r.t_best == pytest.approx(1.8e9)
    assert read_ledger(ws.ledger_path) == list(r.records)
    assert len(ws.ledger_path.read_text().splitlines()) == 2 + 5 + 1
    assert keep_chain_ok(list(r.records))
    assert ws.config_path.read_text() == up2.serialize()
    assert r.reason == "exhausted"


def test_only_regressions_stop_after_five_reverts(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    worse = [K0.with_params(tile_m=t) for t in (8, 16, 64, 128, 256)] + [K0.with_params(unroll=2)]
    r = _run(ws, worse, {c: 0.5 for c in worse})
    assert r.reason == "consecutive_reverts"
    assert r.n_rev_trace[-1] == 5 and r.experiments == 5
    assert r.k_best == K0


def test_speedup_target_on_first_iteration(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    fast = K0.with_params(vector_width=8)
    r = _run(ws, [fast, K0.with_params(tile_m=8)], {fast: 2.05})
    assert r.reason == "speedup" and r.experiments == 1


def test_peak_criterion(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    fast = K0.with_params(vector_width=8)
    hw = HardwareSpec("toy", 1e15, 2e9)  # baseline sits at 50% of bandwidth
    r = _run(ws, [fast, K0.with_params(tile_m=8)], {fast: 1.85}, hw=hw)
    assert r.reason == "peak"
    assert r.records[-1].pct_of_peak == pytest.approx(0.925)


def test_time_criterion_with_fake_clock(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    ticks = itertools.count(0.0, 100.0)
    worse = [K0.with_params(tile_m=t) for t in (8, 16, 64, 128, 256)]
    r = _run(ws, worse, {c: 0.5 for c in worse}, MoveOnCriteria(100, 0.9, 250.0, 2.0), clock=lambda: next(ticks))
    assert r.reason == "time"
    assert 0 < r.experiments < len(worse)


def test_max_iterations_and_exhaustion(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    steps = [K0.with_params(tile_m=8), K0.with_params(tile_m=16)]
    assert _run(ws, steps, {}, max_iterations=1).reason == "max_iterations"
    assert _run(ws, [], {}).reason == "exhausted"


def test_failed_proposals_count_as_reverts(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    r = _run(ws, [ProposalError("nope"), K0, default_config(KernelType.SOFTMAX)], {})
    assert [x.failed_stage for x in r.records[1:]] == ["proposal"] * 3
    assert r.n_rev_trace == (1, 2, 3)
    assert all(x.decision is Decision.REVERT for x in r.records[1:])


def test_baseline_failure_aborts(make_ws, rms_spec):
    ws = make_ws(rms_spec, config=default_config(RMS, "broken"))
    with pytest.raises(BaselineError):
        _run(ws, [K0], {})


def test_store_failure_leaves_last_kept_config(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    up = K0.with_params(vector_width=8)

    class FailingStore(MemoryStore):
        commits = 0

        def commit(self, message):
            self.commits += 1
            if self.commits > 1:
                raise StoreError("disk full")
            super().commit(message)

    with pytest.raises(StoreError):
        _run(ws, [up, up.with_params(tile_m=8)], {up: 1.5}, store=FailingStore(ws.path))
    assert ws.read_config() == up


def test_single_file_invariant(make_ws, rms_spec):
    ws = make_ws(rms_spec)

    class Tamper(ScriptedMutator):
        def next(self, k_best, history, roofline):
            ws.spec_path.write_text(ws.spec_path.read_text() + "extra=1\n")
            return super().next(k_best, history, roofline)

    with pytest.raises(StoreError, match="spec.cfg"):
        run_loop(ws, Tamper([K0.with_params(tile_m=8)]), None, FAST_MEASURE, FAST_HARNESS,
                 MemoryStore(ws.path), SimulatedTiming())


def test_git_store_keeps_only_kept_commits(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    a, b, c = K0.with_params(vector_width=8), K0.with_params(vector_width=2), K0.with_params(vector_width=8, unroll=2)
    r = _run(ws, [a, b, c], {a: 1.5, b: 1.0, c: 1.7}, store=GitStore(ws.path))
    assert [x.decision.value for x in r.records[1:]] == ["keep", "revert", "keep"]
    store = GitStore(ws.path)
    assert store.messages() == ["baseline", "iter 1: scripted step 1", "iter 3: scripted step 3"]
    assert store.head_text("candidate.cfg") == c.serialize()
    # re-running continues from a clean head
    store.ensure_baseline()


def test_git_store_refuses_dirty_repo(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    store = GitStore(ws.path)
    store.ensure_baseline()
    ws.config_path.write_text(K0.with_params(tile_m=8).serialize())
    with pytest.raises(StoreError):
        GitStore(ws.path).ensure_baseline()


def test_memory_store_matches_git_semantics(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    a, b = K0.with_params(vector_width=8), K0.with_params(vector_width=2)
    store = MemoryStore(ws.path)
    _run(ws, [a, b], {a: 1.5}, store=store)
    assert store.messages() == ["baseline", "iter 1: scripted step 1"]
    assert store.head_text("candidate.cfg") == a.serialize()


# ---------------------------------------------------------------- playbook

def test_playbook_compute_bound_starts_with_tile_sizes():
    mm = default_config(KernelType.MATMUL)
    p = PlaybookMutator().next(mm, [], None)
    assert p.description.startswith("tier 1: set tile_")
    changed = {k for k, v in p.config.params if mm.param(k) != v}
    assert len(changed) == 1 and changed.pop().startswith("tile_")


def test_playbook_memory_bound_starts_with_vector_width():
    p = PlaybookMutator().next(K0, [], None)
    assert p.description.startswith("tier 2: set vector_width=")
    roof = RooflineStatus(1.0, Regime.COMPUTE, 0.1)
    assert PlaybookMutator().next(K0, [], roof).description.startswith("tier 1:")


def _record(cfg):
    return ExperimentRecord(1, "t", cfg.digest(), Decision.REVERT, True, None, 1.0, None, "")


def test_playbook_never_repeats_history():
    m = PlaybookMutator()
    history, seen = [], {K0.digest()}
    while (p := m.next(K0, history, None)) is not None:
        assert p.config.digest() not in seen
        seen.add(p.config.digest())
        history.append(_record(p.config))
    assert len(history) > 10


def test_playbook_exhausted_when_neighbourhood_is_in_history():
    m = PlaybookMutator()
    history = [_record(cfg) for cfg, _ in m.candidates(K0)]
    assert len(history) == sum(len(d.values) - 1 for d in enumerate_params(RMS, K0.variant))
    assert m.next(K0, history, None) is None


def test_playbook_is_deterministic():
    a = [PlaybookMutator().next(K0, [], None) for _ in range(3)]
    assert len({p.config.digest() for p in a}) == 1


def test_random_mutator_is_seeded():
    def seq(seed):
        m, hist, out = RandomMutator(seed), [], []
        for _ in range(8):
            p = m.next(K0, hist, None)
            hist.append(_record(p.config))
            out.append(p.config.digest())
        return out
    assert seq(3) == seq(3)
    assert seq(3) != seq(4)


# ---------------------------------------------------------------- external protocol

def test_request_layout():
    text = build_request(K0, "HIST\n", None, "type=rmsnorm\n")
    names = [line[4:] for line in text.splitlines() if line.startswith("--- ")]
    assert names == ["CONFIG", "HISTORY", "ROOFLINE", "SPEC"]
    sections = parse_sections(text, ("CONFIG", "HISTORY", "ROOFLINE", "SPEC"))
    assert sections["CONFIG"] == K0.serialize()
    assert sections["ROOFLINE"] == "unknown\n"


def test_response_parsing():
    new = K0.with_params(tile_m=64)
    ok = parse_response(render_sections({"CONFIG": new.serialize(), "DESCRIPTION": "bigger\ntiles"}), K0)
    assert ok == Proposal(new, "bigger tiles")
    for bad in ["", "hello\n", render_sections({"CONFIG": K0.serialize()}),
                render_sections({"CONFIG": "kernel_type=rmsnorm\n"}),
                render_sections({"CONFIG": new.serialize(), "EXTRA": "x"}),
                render_sections({"CONFIG": default_config(KernelType.SOFTMAX).serialize()})]:
        with pytest.raises(ProposalError):
            parse_response(bad, K0)


@pytest.mark.parametrize("stub,expect", [
    ("valid_proposal", None), ("garbage", "malformed"), ("echo", "identical"), ("timeout", "timed out")])
def test_stub_mutators(make_ws, rms_spec, stub, expect):
    ws = make_ws(rms_spec)
    m = ExternalMutator(stub_command(stub), timeout=3.0)
    r = run_loop(ws, m, None, FAST_MEASURE, FAST_HARNESS, MemoryStore(ws.path), SimulatedTiming(), max_iterations=1)
    rec = r.records[1]
    if expect is None:
        assert rec.failed_stage is None and rec.description == "stub: set tile_m=64"
    else:
        assert rec.failed_stage == "proposal" and expect in rec.description


def test_unstartable_mutator_is_an_error(make_ws, rms_spec):
    ws = make_ws(rms_spec)
    with pytest.raises(MutatorError):
        run_loop(ws, ExternalMutator(["/nonexistent/mutator"]), None, FAST_MEASURE, FAST_HARNESS,
                 MemoryStore(ws.path), SimulatedTiming(), max_iterations=1)


def test_make_mutator():
    assert isinstance(make_mutator("playbook"), PlaybookMutator)
    assert isinstance(make_mutator("random", seed=1), RandomMutator)
    ext = make_mutator(f"exec:{sys.executable} -c pass")
    assert isinstance(ext, ExternalMutator) and ext.timeout == 120.0
    with pytest.raises(MutatorError):
        make_mutator("llm")
