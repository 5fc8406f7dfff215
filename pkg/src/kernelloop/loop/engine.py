"""The single-kernel keep/revert loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

from kernelloop.core import HardwareSpec, RooflineStatus
from kernelloop.errors import (BaselineError, ConfigError, ContractError, KernelloopError,
                               MeasurementError, ProposalError, StoreError)
from kernelloop.harness import (HarnessSettings, MeasureSettings, TimingBackend, VerificationReport,
                                bench)
from kernelloop.ledger import Decision, ExperimentRecord, append_record, new_ledger, now_stamp
from kernelloop.loop.mutators import Mutator, Proposal
from kernelloop.loop.store import GitStore, VersionStore
from kernelloop.planner import CONFIG_FILE, Workspace
from kernelloop.zoo.params import CandidateConfig, parse_config
from kernelloop.zoo.variants import validate_config

log = logging.getLogger(__name__)

KEEP_THRESHOLD = 1.01
HARNESS_LOG = "report_harness.tsv"
MOVE_ON_REASONS = ("consecutive_reverts", "peak", "time", "speedup")


@dataclass(frozen=True)
class MoveOnCriteria:
    max_consecutive_reverts: int = 5
    peak_fraction: float = 0.90
    time_budget_seconds: float = 7200.0
    speedup_target: float = 2.0

    def __post_init__(self):
        if not self.max_consecutive_reverts > 0:
            raise ContractError("max_consecutive_reverts must be positive")
        if not 0 < self.peak_fraction <= 1:
            raise ContractError("peak_fraction must be in (0, 1]")
        if not self.time_budget_seconds > 0:
            raise ContractError("time_budget_seconds must be positive")
        if not self.speedup_target > 0:
            raise ContractError("speedup_target must be positive")

    def capped(self, seconds: float) -> "MoveOnCriteria":
        """Same criteria with the time budget cut down to ``seconds`` (orchestrator cap)."""
        return MoveOnCriteria(self.max_consecutive_reverts, self.peak_fraction,
                              min(self.time_budget_seconds, seconds), self.speedup_target)


@dataclass
class LoopState:
    k_best: CandidateConfig
    t_best: float
    t_baseline: float
    started_at: float
    n_rev: int = 0
    iteration: int = 0
    history: list[ExperimentRecord] = field(default_factory=list)
    roofline: RooflineStatus | None = None


@dataclass(frozen=True)
class LoopResult:
    k_best: CandidateConfig
    t_best: float
    t_baseline: float
    records: tuple[ExperimentRecord, ...]
    reason: str
    wall_seconds: float
    n_rev_trace: tuple[int, ...] = ()  # consecutive-revert count after each iteration

    @property
    def speedup(self) -> float:
        return self.t_best / self.t_baseline

    @property
    def experiments(self) -> int:
        return len(self.records) - 1

    @property
    def kept(self) -> int:
        return sum(r.decision is Decision.KEEP for r in self.records[1:])


def keep_decision(passed: bool, t_prime: float | None, t_best: float) -> Decision:
    if not t_best > 0:
        raise ContractError("t_best must be positive")
    if passed and t_prime is not None and t_prime > KEEP_THRESHOLD * t_best:
        return Decision.KEEP
    return Decision.REVERT


def should_move_on(state: LoopState, criteria: MoveOnCriteria, roofline: RooflineStatus | None,
                   now: float) -> tuple[bool, str | None]:
    """First criterion met, checked in the fixed order reverts, peak, time, speedup."""
    if state.n_rev >= criteria.max_consecutive_reverts:
        return True, "consecutive_reverts"
    if roofline is not None and roofline.pct_of_peak >= criteria.peak_fraction:
        return True, "peak"
    if now - state.started_at >= criteria.time_budget_seconds:
        return True, "time"
    if state.t_best / state.t_baseline >= criteria.speedup_target:
        return True, "speedup"
    return False, None


def _record(iteration: int, config: CandidateConfig, decision: Decision, report: VerificationReport | None,
            failed_stage: str | None, description: str) -> ExperimentRecord:
    throughput = report.throughput if report is not None else None
    pct = report.roofline.pct_of_peak if report is not None and report.roofline is not None else None
    return ExperimentRecord(iteration, now_stamp(), config.digest(), decision,
                            report is not None and report.all_passed and failed_stage is None,
                            failed_stage, throughput, pct, description)


def _check_proposal(proposal: Proposal, k_best: CandidateConfig) -> None:
    cfg = proposal.config
    if cfg.kernel_type is not k_best.kernel_type:
        raise ProposalError(f"proposal configures {cfg.kernel_type.value}, expected {k_best.kernel_type.value}")
    try:
        validate_config(cfg)
    except ConfigError as exc:
        raise ProposalError(f"invalid proposal: {exc}") from None
    if cfg.digest() == k_best.digest():
        raise ProposalError("proposal is identical to the current best")


def _append_harness_log(workspace: Workspace, iteration: int, report: VerificationReport) -> None:
    with open(workspace.path / HARNESS_LOG, "a") as fh:
        for line in report.tsv_lines():
            fh.write(f"{iteration}\t{line}\n")


def run_loop(workspace: Workspace, mutator: Mutator, criteria: MoveOnCriteria | None = None,
             measure_settings: MeasureSettings | None = None, harness_settings: HarnessSettings | None = None,
             store: VersionStore | None = None, backend: TimingBackend | None = None,
             max_iterations: int | None = None, hw: HardwareSpec | None = None,
             clock: Callable[[], float] = time.monotonic) -> LoopResult:
    """Optimize one workspace's config until a move-on criterion fires or the mutator runs dry.

    The ledger is rewritten from scratch: one baseline row, then one row per iteration.
    """
    criteria = criteria or MoveOnCriteria()
    hw = hw or workspace.hardware
    spec = workspace.spec
    store = store or GitStore(workspace.path)
    if hasattr(mutator, "bind"):
        mutator.bind(workspace.spec_path.read_text())

    k_best = workspace.read_config()
    store.ensure_baseline()
    new_ledger(workspace.ledger_path)
    (workspace.path / HARNESS_LOG).unlink(missing_ok=True)

    try:
        base = bench(k_best, spec, measure_settings, hw, harness_settings, backend)
    except MeasurementError as exc:
        raise BaselineError(f"{spec.name}: baseline measurement failed: {exc}") from exc
    _append_harness_log(workspace, 0, base)
    if not base.all_passed:
        raise BaselineError(f"{spec.name}: starter config fails the harness: {base.failed_stage.value}")
    baseline_row = _record(0, k_best, Decision.KEEP, base, None, f"baseline {k_best.describe()}")
    append_record(workspace.ledger_path, baseline_row)

    t0 = clock()
    state = LoopState(k_best, base.throughput, base.throughput, t0, history=[baseline_row], roofline=base.roofline)
    reason = "exhausted"
    n_rev_trace: list[int] = []
    while True:
        stop, why = should_move_on(state, criteria, state.roofline, clock())
        if stop:
            reason = why
            break
        if max_iterations is not None and state.iteration >= max_iterations:
            reason = "max_iterations"
            break
        state.iteration += 1
        i = state.iteration
        try:
            proposal = mutator.next(state.k_best, state.history, state.roofline)
            if proposal is None:
                state.iteration -= 1
                reason = "exhausted"
                break
            _check_proposal(proposal, state.k_best)
        except ProposalError as exc:
            log.info("iteration %d: failed proposal: %s", i, exc)
            rec = ExperimentRecord(i, now_stamp(), state.k_best.digest(), Decision.REVERT, False,
                                   "proposal", None, None, f"failed proposal: {exc}")
            _log(workspace, state, rec)
            state.n_rev += 1
            n_rev_trace.append(state.n_rev)
            continue

        candidate = proposal.config
        try:
            workspace.config_path.write_text(candidate.serialize())
            store.check_only_changed(CONFIG_FILE)
            store.commit(f"iter {i}: {proposal.description}")
        except (StoreError, OSError) as exc:
            _restore(workspace, state.k_best)
            raise StoreError(f"{spec.name}: version store failed at iteration {i}: {exc}") from exc

        failed_stage = None
        try:
            report = bench(candidate, spec, measure_settings, hw, harness_settings, backend)
            _append_harness_log(workspace, i, report)
            if not report.all_passed:
                failed_stage = report.failed_stage.value
        except MeasurementError as exc:
            log.warning("iteration %d: measurement failed: %s", i, exc)
            report, failed_stage = None, "measure"

        t_prime = report.throughput if report is not None else None
        decision = keep_decision(failed_stage is None, t_prime, state.t_best)
        rec = _record(i, candidate, decision, report, failed_stage, proposal.description)
        if decision is Decision.KEEP:
            state.k_best, state.t_best, state.n_rev = candidate, t_prime, 0
            state.roofline = report.roofline
        else:
            try:
                store.revert_last()
            except StoreError as exc:
                _restore(workspace, state.k_best)
                raise StoreError(f"{spec.name}: revert failed at iteration {i}: {exc}") from exc
            state.n_rev += 1
            on_disk = parse_config(workspace.config_path.read_text(), workspace.config_path)
            if on_disk.digest() != state.k_best.digest():
                _restore(workspace, state.k_best)
                raise StoreError(f"{spec.name}: workspace config does not match k_best after revert")
        _log(workspace, state, rec)
        n_rev_trace.append(state.n_rev)
        log.info("iteration %d: %s %s (t'=%s, t_best=%.6g)", i, decision.value, proposal.description,
                 "-" if t_prime is None else f"{t_prime:.6g}", state.t_best)

    if workspace.config_path.read_text() != state.k_best.serialize():
        raise KernelloopError(f"{spec.name}: final workspace config differs from k_best")
    return LoopResult(state.k_best, state.t_best, state.t_baseline, tuple(state.history), reason,
                      clock() - t0, tuple(n_rev_trace))


def _log(workspace: Workspace, state: LoopState, rec: ExperimentRecord) -> None:
    append_record(workspace.ledger_path, rec)
    state.history.append(rec)


def _restore(workspace: Workspace, k_best: CandidateConfig) -> None:
    try:
        workspace.config_path.write_text(k_best.serialize())
    except OSError:
        log.error("could not restore %s", workspace.config_path)


def t_best_trace(records) -> list[float]:
    """t_best after each record, for monotonicity checks."""
    out, best = [], -math.inf
    for r in records:
        if r.decision is Decision.KEEP:
            best = r.throughput
        out.append(best)
    return out
