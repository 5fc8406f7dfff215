"""Append-only experiment ledger (TSV), one row per loop iteration plus the baseline row."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from kernelloop.errors import ParseError

LEDGER_MAGIC = "# kernelloop-ledger v1"
LEDGER_COLUMNS = ("iter", "timestamp", "digest", "decision", "passed", "failed_stage",
                  "throughput", "pct_peak", "description")
LEDGER_HEADER = "\t".join(LEDGER_COLUMNS)


class Decision(str, enum.Enum):
    KEEP = "keep"
    REVERT = "revert"


@dataclass(frozen=True)
class ExperimentRecord:
    iteration: int
    timestamp: str
    config_digest: str
    decision: Decision
    passed: bool
    failed_stage: str | None
    throughput: float | None
    pct_of_peak: float | None
    description: str

    def __post_init__(self):
        object.__setattr__(self, "decision", Decision(self.decision))
        if self.decision is Decision.KEEP and not (self.passed and self.throughput is not None):
            raise ValueError("a kept experiment must have passed and carry a throughput")

    def row(self) -> str:
        def num(x):
            return "-" if x is None else repr(float(x))

        desc = " ".join(self.description.split()) or "-"
        return "\t".join([str(self.iteration), self.timestamp, self.config_digest, self.decision.value,
                          "true" if self.passed else "false", self.failed_stage or "-",
                          num(self.throughput), num(self.pct_of_peak), desc])

    @classmethod
    def from_row(cls, line: str, path=None, lineno=None) -> "ExperimentRecord":
        cols = line.rstrip("\n").split("\t")
        if len(cols) != len(LEDGER_COLUMNS):
            raise ParseError(f"ledger rows have {len(LEDGER_COLUMNS)} columns, got {len(cols)}", path, lineno)

        def num(x):
            return None if x == "-" else float(x)

        try:
            return cls(int(cols[0]), cols[1], cols[2], Decision(cols[3]), cols[4] == "true",
                       None if cols[5] == "-" else cols[5], num(cols[6]), num(cols[7]),
                       "" if cols[8] == "-" else cols[8])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None


def now_stamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def new_ledger(path: str | Path) -> None:
    Path(path).write_text(f"{LEDGER_MAGIC}\n{LEDGER_HEADER}\n")


def append_record(path: str | Path, record: ExperimentRecord) -> None:
    with open(path, "a") as fh:
        fh.write(record.row() + "\n")


def read_ledger(path: str | Path) -> list[ExperimentRecord]:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or lines[0] != LEDGER_MAGIC or lines[1] != LEDGER_HEADER:
        raise ParseError("not a kernelloop ledger", path, 1)
    return [ExperimentRecord.from_row(line, path, i) for i, line in enumerate(lines[2:], 3) if line.strip()]


def ledger_tail(path: str | Path, n: int = 50) -> str:
    """Header plus the last ``n`` rows, as sent to external mutators."""
    lines = Path(path).read_text().splitlines()[2:]
    return "\n".join([LEDGER_HEADER] + lines[-n:]) + "\n"


def keep_chain_ok(records: list[ExperimentRecord], threshold: float = 1.01) -> bool:
    """Every kept row after the baseline beats the previous keep by more than ``threshold``."""
    best = None
    for r in records:
        if r.decision is Decision.KEEP:
            if best is not None and not r.throughput > threshold * best:
                return False
            best = r.throughput
    return best is not None and math.isfinite(best)
