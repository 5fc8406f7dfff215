import os

import pytest
from hypothesis import HealthCheck, settings

from kernelloop.core import KernelSpec
from kernelloop.harness import HarnessSettings, MeasureSettings
from kernelloop.planner import create_workspace

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# small shapes and a coarse sweep keep loop tests fast; the gate itself is exercised at full desk scale elsewhere
FAST_HARNESS = HarnessSettings(sweep_divisor=64)
FAST_MEASURE = MeasureSettings(warmup_iters=0, timed_iters=10)


@pytest.fixture
def rms_spec():
    return KernelSpec.make("rmsnorm", {"M": 64, "N": 256}, "fp32")


@pytest.fixture
def make_ws(tmp_path):
    counter = iter(range(10_000))

    def make(spec, **kw):
        return create_workspace(tmp_path / f"ws{next(counter)}", spec, **kw)
    return make


# one pass/fail line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1][len("test_"):]
    if report.when == "call" or report.outcome != "passed":
        prev = _ACCEPTANCE.get(name)
        if prev is None or prev[0] == "PASS":
            _ACCEPTANCE[name] = ("PASS" if report.outcome == "passed" else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        verdict, seconds = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{name:<40} {verdict}  ({seconds:.1f} s)")
