"""Command-line entry point: profile, plan, extract, loop, orchestrate, verify, score, report."""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

from kernelloop.errors import KernelloopError
from kernelloop.harness import HarnessSettings, MeasureSettings
from kernelloop.loop.engine import MoveOnCriteria, run_loop
from kernelloop.loop.mutators import make_mutator
from kernelloop.loop.store import make_store
from kernelloop.orchestrator import (orchestrate, parse_results, parse_summary, results_text, run_problem_set,
                                     score, verify_end_to_end, write_summary)
from kernelloop.planner import (build_plan, extract_workspaces, list_workspaces, open_workspace, read_plan,
                                render_plan, write_plan)
from kernelloop.profiler import export_profile, import_profile, load_model, load_rules, profile, resolve_hardware, summarize
from kernelloop.simulated import SimulatedTiming, hashed_speed

log = logging.getLogger("kernelloop")


def _backend(args):
    return SimulatedTiming(hashed_speed) if getattr(args, "timing", "wall") == "simulated" else None


def _criteria(args) -> MoveOnCriteria:
    return MoveOnCriteria(args.max_reverts, args.peak_fraction, args.budget_seconds, args.speedup_target)


def _measure(args) -> MeasureSettings:
    return MeasureSettings(args.warmup, args.iters)


def _harness(args) -> HarnessSettings:
    return HarnessSettings(sweep_divisor=args.sweep_divisor)


def _mutator_factory(args):
    # each kernel gets its own seed so random runs differ across kernels but repeat across invocations
    seeds = itertools.count(args.seed)
    return lambda ws: make_mutator(args.mutator, seed=next(seeds), timeout=args.mutator_timeout)


def cmd_profile(args) -> int:
    model = load_model(args.model)
    hw = resolve_hardware(args.hardware)
    rules = load_rules(args.rules) if args.rules else None
    prof = profile(model, args.warmup, args.iters, hw, rules, timer=_backend(args))
    export_profile(prof, args.out)
    print(summarize(prof), end="")
    print(f"wrote {args.out}")
    return 0


def cmd_plan(args) -> int:
    plan = build_plan(import_profile(args.profile), args.min_fraction)
    write_plan(plan, args.out)
    print(render_plan(plan), end="")
    print(f"wrote {args.out}")
    return 0


def cmd_extract(args) -> int:
    for ws in extract_workspaces(read_plan(args.plan), args.out, force=args.force):
        print(ws.path)
    return 0


def cmd_loop(args) -> int:
    ws = open_workspace(args.workspace)
    hw = resolve_hardware(args.hardware) if args.hardware else None
    result = run_loop(ws, make_mutator(args.mutator, args.seed, args.mutator_timeout), _criteria(args),
                      _measure(args), _harness(args), make_store(args.store, ws.path), _backend(args),
                      args.max_iterations, hw)
    print(f"{ws.spec.name}: {result.experiments} experiments, {result.kept} kept, "
          f"speedup {result.speedup:.4f}, stopped on {result.reason}")
    print(f"best: {result.k_best.describe()}")
    return 0


def cmd_orchestrate(args) -> int:
    plan = read_plan(args.plan)
    workspaces = list_workspaces(args.workspaces)
    summary = orchestrate(plan, workspaces, _criteria(args), _mutator_factory(args), args.budget_seconds,
                          _measure(args), _harness(args), args.store, _backend(args), args.max_iterations,
                          report_dir=args.workspaces)
    print(summary.render(), end="")
    return 0


def cmd_verify(args) -> int:
    model = load_model(args.model)
    workspaces = list_workspaces(args.workspaces)
    result = verify_end_to_end(model, workspaces, iters=args.iters, backend=_backend(args))
    print(f"correct: {'true' if result.correct else 'false'}")
    if not result.correct:
        print(f"offending op: {result.message}")
    print(f"measured speedup: {result.measured_S:.4f}")
    summary_path = Path(args.workspaces) / "summary.tsv"
    if summary_path.exists():
        summary = parse_summary(summary_path.read_text(), summary_path).with_measured(result.measured_S)
        write_summary(summary, args.workspaces)
        print(f"projected speedup: {summary.projected_S:.4f}")
    return 0 if result.correct else 1


def cmd_score(args) -> int:
    if args.problems:
        if not args.results:
            raise KernelloopError("--problems needs --results to write to")
        rows = run_problem_set(args.problems, args.work, _criteria(args), _mutator_factory(args), _measure(args),
                               _harness(args), args.store, _backend(args), args.max_iterations, args.force)
        Path(args.results).write_text(results_text(rows))
    elif not args.results:
        raise KernelloopError("give --results, or --problems with --results")
    rows = parse_results(Path(args.results).read_text(), args.results)
    result = score([(ok, s) for _, ok, s in rows])
    print(f"problems\t{result.problems}")
    for line in result.lines():
        print(line)
    return 0


def cmd_report(args) -> int:
    from kernelloop.report import write_report

    for path in write_report(args.target, args.out):
        print(path)
    return 0


def _add_loop_flags(p: argparse.ArgumentParser, budget_help: str) -> None:
    p.add_argument("--mutator", default="playbook", help="playbook, random or exec:<command>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutator-timeout", type=float, default=120.0, help="seconds per external proposal")
    p.add_argument("--budget-seconds", type=float, default=7200.0, help=budget_help)
    p.add_argument("--max-reverts", type=int, default=5)
    p.add_argument("--peak-fraction", type=float, default=0.90)
    p.add_argument("--speedup-target", type=float, default=2.0)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--store", choices=("git", "memory"), default="git")
    p.add_argument("--warmup", type=int, default=25, help="untimed runs before measuring")
    p.add_argument("--iters", type=int, default=200, help="timed runs per measurement")
    p.add_argument("--sweep-divisor", type=int, default=8, help="shrink factor for sweep shapes")
    p.add_argument("--timing", choices=("wall", "simulated"), default="wall")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernelloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="time a model op by op and write a profile TSV")
    p.add_argument("--model", required=True, help="a .model file or a bundled fixture name")
    p.add_argument("--out", required=True)
    p.add_argument("--hardware", default="H100", help="database name, 'calibrate', or name=.. peak_flops=.. peak_bandwidth=..")
    p.add_argument("--rules", help="classification rules file")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--timing", choices=("wall", "simulated"), default="wall")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="rank kernels by time fraction and write a plan")
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-fraction", type=float, default=0.01)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("extract", help="create one workspace per plan entry")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("loop", help="optimize one workspace")
    p.add_argument("--workspace", required=True)
    p.add_argument("--hardware", help="override the workspace hardware")
    _add_loop_flags(p, "time budget for this kernel")
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("orchestrate", help="optimize every workspace in plan order")
    p.add_argument("--plan", required=True)
    p.add_argument("--workspaces", required=True)
    _add_loop_flags(p, "total time budget shared by all kernels")
    p.set_defaults(func=cmd_orchestrate)

    p = sub.add_parser("verify", help="check end-to-end correctness and speedup")
    p.add_argument("--model", required=True)
    p.add_argument("--workspaces", required=True)
    p.add_argument("--iters", type=int, default=5, help="timed forwards per configuration")
    p.add_argument("--timing", choices=("wall", "simulated"), default="wall")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("score", help="fast_p over a results file, optionally running a problem set first")
    p.add_argument("--results", help="results TSV to read (or write, with --problems)")
    p.add_argument("--problems", help="directory of *.cfg problem specs to optimize first")
    p.add_argument("--work", default="problem_workspaces")
    p.add_argument("--force", action="store_true")
    _add_loop_flags(p, "time budget per problem")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="write text/TSV reports and figures")
    p.add_argument("--target", required=True, help="a workspace or a directory of workspaces")
    p.add_argument("--out", help="output directory (default: the target)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KernelloopError as exc:
        print(f"kernelloop {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"kernelloop {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
