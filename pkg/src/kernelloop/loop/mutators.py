"""Candidate generators for the loop: the tiered playbook, a seeded random walk, a scripted
sequence for tests, and an external process speaking a framed text protocol."""

from __future__ import annotations

import math
import random
import shlex
import subprocess
import sys
from pathlib import Path
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from kernelloop.core import Regime, RooflineStatus
from kernelloop.errors import ConfigError, MutatorError, ParseError, ProposalError
from kernelloop.ledger import LEDGER_HEADER, ExperimentRecord
from kernelloop.zoo.params import CandidateConfig, ParamDomain, parse_config
from kernelloop.zoo.variants import enumerate_params, switch_variant

MEMORY_TIER_ORDER = (2, 1, 3, 4, 5, 6)
COMPUTE_TIER_ORDER = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class Proposal:
    config: CandidateConfig
    description: str


class Mutator(Protocol):
    def next(self, k_best: CandidateConfig, history: Sequence[ExperimentRecord],
             roofline: RooflineStatus | None) -> Proposal | None:
        """A new candidate, or None once the search space is exhausted. Raises ProposalError
        for a failed proposal (the loop logs it and counts a revert)."""


def _apply(config: CandidateConfig, domain: ParamDomain, value) -> CandidateConfig:
    if domain.name == "variant":
        return switch_variant(config, value)
    return config.with_params(**{domain.name: value})


def proximity_order(domain: ParamDomain, current) -> list:
    """Domain values other than ``current``: numeric ones nearest first in log2 distance
    (larger value first on ties), others in declared order."""
    others = [v for v in domain.values if v != current]
    if domain.numeric and isinstance(current, int):
        return sorted(others, key=lambda v: (abs(math.log2(v) - math.log2(current)), -v))
    return others


class PlaybookMutator:
    """Deterministic tier-ordered coordinate search.

    Memory-bound kernels start with tier-2 parameters (memory access), compute-bound ones
    with tier 1 (block sizes); then tiers ascend. Within a tier each parameter is swept
    outward from its current value. A digest already in the history is never proposed.
    """

    def __init__(self, regime: Regime | None = None):
        self.regime = regime

    def _tiers(self, k_best: CandidateConfig, roofline: RooflineStatus | None):
        regime = roofline.bound if roofline is not None else (self.regime or k_best.kernel_type.regime)
        return MEMORY_TIER_ORDER if regime is Regime.MEMORY else COMPUTE_TIER_ORDER

    def candidates(self, k_best: CandidateConfig, roofline: RooflineStatus | None = None):
        domains = enumerate_params(k_best.kernel_type, k_best.variant)
        current = k_best.as_dict()
        current["variant"] = k_best.variant
        for tier in self._tiers(k_best, roofline):
            for domain in (d for d in domains if d.tier == tier):
                for value in proximity_order(domain, current[domain.name]):
                    yield _apply(k_best, domain, value), f"tier {tier}: set {domain.name}={value}"

    def next(self, k_best, history, roofline):
        seen = {r.config_digest for r in history} | {k_best.digest()}
        for config, description in self.candidates(k_best, roofline):
            if config.digest() not in seen:
                return Proposal(config, description)
        return None


class RandomMutator:
    """Changes one randomly chosen parameter per step; reproducible for a given seed."""

    def __init__(self, seed: int = 0, attempts: int = 200):
        self.rng = random.Random(seed)
        self.attempts = attempts

    def next(self, k_best, history, roofline):
        seen = {r.config_digest for r in history} | {k_best.digest()}
        domains = enumerate_params(k_best.kernel_type, k_best.variant)
        current = k_best.as_dict()
        current["variant"] = k_best.variant
        for _ in range(self.attempts):
            domain = self.rng.choice(domains)
            value = self.rng.choice([v for v in domain.values if v != current[domain.name]])
            config = _apply(k_best, domain, value)
            if config.digest() not in seen:
                return Proposal(config, f"random: set {domain.name}={value}")
        return None


class ScriptedMutator:
    """Replays a fixed list of proposals; an Exception item is raised as a failed proposal."""

    def __init__(self, steps: Iterable[Proposal | CandidateConfig | Exception]):
        self.steps = list(steps)
        self.calls = 0

    def next(self, k_best, history, roofline):
        if self.calls >= len(self.steps):
            return None
        step = self.steps[self.calls]
        self.calls += 1
        if isinstance(step, Exception):
            raise ProposalError(str(step))
        if isinstance(step, CandidateConfig):
            return Proposal(step, f"scripted step {self.calls}")
        return step


# ---------------------------------------------------------------- external process

SECTION_PREFIX = "--- "
REQUEST_SECTIONS = ("CONFIG", "HISTORY", "ROOFLINE", "SPEC")
RESPONSE_SECTIONS = ("CONFIG", "DESCRIPTION")


def render_sections(sections: dict[str, str]) -> str:
    out = []
    for name, body in sections.items():
        out.append(f"{SECTION_PREFIX}{name}\n")
        out.append(body if body.endswith("\n") or not body else body + "\n")
    return "".join(out)


def parse_sections(text: str, allowed: Sequence[str]) -> dict[str, str]:
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith(SECTION_PREFIX):
            name = line[len(SECTION_PREFIX):].strip()
            if name not in allowed:
                raise ParseError(f"unknown section {name!r}", "response", lineno)
            if name in sections:
                raise ParseError(f"duplicate section {name!r}", "response", lineno)
            sections[name] = []
            current = name
        elif current is None:
            if line.strip():
                raise ParseError("text before the first section", "response", lineno)
        else:
            sections[current].append(line)
    return {k: "\n".join(v) + ("\n" if v else "") for k, v in sections.items()}


def build_request(k_best: CandidateConfig, history_text: str, roofline: RooflineStatus | None,
                  spec_text: str) -> str:
    return render_sections({
        "CONFIG": k_best.serialize(),
        "HISTORY": history_text,
        "ROOFLINE": roofline.summary() if roofline is not None else "unknown",
        "SPEC": spec_text,
    })


def history_text(history: Sequence[ExperimentRecord], limit: int = 50) -> str:
    return "\n".join([LEDGER_HEADER] + [r.row() for r in history[-limit:]]) + "\n"


def parse_response(text: str, k_best: CandidateConfig) -> Proposal:
    try:
        sections = parse_sections(text, RESPONSE_SECTIONS)
    except ParseError as exc:
        raise ProposalError(f"malformed response: {exc}") from None
    if "CONFIG" not in sections:
        raise ProposalError("response has no CONFIG section")
    try:
        config = parse_config(sections["CONFIG"], "response")
    except (ParseError, ConfigError, ValueError) as exc:
        raise ProposalError(f"invalid config in response: {exc}") from None
    if config.kernel_type is not k_best.kernel_type:
        raise ProposalError(f"response configures {config.kernel_type.value}, expected {k_best.kernel_type.value}")
    if config.digest() == k_best.digest():
        raise ProposalError("response config is identical to the current best")
    description = " ".join(sections.get("DESCRIPTION", "").split()) or "external proposal"
    return Proposal(config, description)


class ExternalMutator:
    """Runs ``command`` once per proposal: the request goes to stdin, the response is read
    from stdout. Timeouts, non-zero exits and malformed responses become failed proposals;
    a command that cannot be started at all is a MutatorError."""

    def __init__(self, command: str | Sequence[str], timeout: float = 120.0, spec_text: str = ""):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise MutatorError("empty mutator command")
        self.timeout = timeout
        self.spec_text = spec_text

    def bind(self, spec_text: str) -> None:
        self.spec_text = spec_text

    def next(self, k_best, history, roofline):
        request = build_request(k_best, history_text(history), roofline, self.spec_text)
        try:
            proc = subprocess.run(self.argv, input=request, capture_output=True, text=True, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            raise ProposalError(f"mutator timed out after {self.timeout:g} s") from None
        except OSError as exc:
            raise MutatorError(f"cannot start mutator {self.argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ProposalError(f"mutator exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        return parse_response(proc.stdout, k_best)


STUBS = ("valid_proposal", "garbage", "timeout", "echo")


def stub_command(name: str) -> list[str]:
    """argv running one of the shipped stub mutators with the current interpreter."""
    if name not in STUBS:
        raise MutatorError(f"unknown stub {name!r}; shipped stubs: {', '.join(STUBS)}")
    return [sys.executable, str(Path(__file__).resolve().parent.parent / "stubs" / f"{name}.py")]


def make_mutator(spec: str, seed: int = 0, timeout: float = 120.0) -> Mutator:
    """``playbook``, ``random`` or ``exec:<command>``."""
    if spec == "playbook":
        return PlaybookMutator()
    if spec == "random":
        return RandomMutator(seed)
    if spec.startswith("exec:"):
        return ExternalMutator(spec[len("exec:"):], timeout)
    raise MutatorError(f"unknown mutator {spec!r} (playbook, random or exec:<command>)")


__all__ = [
    "Proposal", "Mutator", "PlaybookMutator", "RandomMutator", "ScriptedMutator", "ExternalMutator",
    "make_mutator", "build_request", "parse_response", "parse_sections", "render_sections",
    "history_text", "proximity_order", "stub_command", "STUBS",
]
