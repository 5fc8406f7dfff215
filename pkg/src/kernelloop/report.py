"""Text/TSV reports and matplotlib figures for a workspace or an orchestration run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from kernelloop.core import HardwareSpec, Metric  # noqa: E402
from kernelloop.errors import KernelloopError  # noqa: E402
from kernelloop.ledger import Decision, ExperimentRecord, read_ledger  # noqa: E402
from kernelloop.loop.engine import t_best_trace  # noqa: E402
from kernelloop.orchestrator import RunSummary, parse_summary  # noqa: E402
from kernelloop.planner import SPEC_FILE, Workspace, list_workspaces, open_workspace  # noqa: E402

REPORT_MAGIC = "# kernelloop-report v1"


def _unit(ws: Workspace) -> tuple[str, float]:
    return ("TFLOP/s", 1e12) if ws.spec.kernel_type.metric is Metric.TFLOPS else ("GB/s", 1e9)


def plot_progress(ws: Workspace, records: list[ExperimentRecord], path: Path) -> Path:
    label, scale = _unit(ws)
    fig, ax = plt.subplots(figsize=(7, 4))
    it = np.array([r.iteration for r in records])
    kept = [r for r in records if r.decision is Decision.KEEP]
    reverted = [r for r in records if r.decision is Decision.REVERT and r.throughput is not None]
    failed = [r for r in records if not r.passed]
    ax.scatter([r.iteration for r in reverted], [r.throughput / scale for r in reverted], c="tab:red",
               marker="o", s=18, label="revert")
    ax.scatter([r.iteration for r in kept], [r.throughput / scale for r in kept], c="tab:green",
               marker="o", s=28, label="keep")
    best = np.array(t_best_trace(records)) / scale
    ax.step(it, best, where="post", c="black", lw=1.2, label="best so far")
    if failed:
        ymin = min(best) if len(best) else 0
        ax.scatter([r.iteration for r in failed], [ymin] * len(failed), c="tab:gray", marker="x",
                   s=24, label="failed")
    ax.set_xlabel("iteration")
    ax.set_ylabel(label)
    ax.set_title(ws.spec.name)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_roofline(hw: HardwareSpec, points: list[tuple[str, float, float]], path: Path) -> Path:
    """``points`` are (label, arithmetic intensity, attained FLOP/s)."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ais = [p[1] for p in points] or [hw.ridge_point]
    x = np.logspace(np.log10(min(min(ais), hw.ridge_point) / 4), np.log10(max(max(ais), hw.ridge_point) * 4), 200)
    ax.loglog(x, np.minimum(hw.peak_flops, x * hw.peak_bandwidth), c="black", lw=1.5, label=f"{hw.name} roof")
    ax.axvline(hw.ridge_point, c="gray", ls=":", lw=1)
    for label, ai, flops in points:
        ax.scatter([ai], [flops], s=30)
        ax.annotate(label, (ai, flops), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("arithmetic intensity (FLOP/byte)")
    ax.set_ylabel("attained FLOP/s")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_amdahl(summary: RunSummary, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 0.5 + 0.45 * max(1, len(summary.kernels))))
    names = [k.name for k in summary.kernels][::-1]
    f = np.array([k.f for k in summary.kernels][::-1])
    saved = np.array([k.contribution for k in summary.kernels][::-1])
    y = np.arange(len(names))
    ax.barh(y, f, color="lightgray", label="time fraction f")
    ax.barh(y, saved, color="tab:blue", label="fraction removed")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlim(0, 1)
    title = f"projected S = {summary.projected_S:.3f}"
    if summary.measured_S is not None:
        title += f", measured S = {summary.measured_S:.3f}"
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _attained_flops(ws: Workspace, throughput: float) -> float:
    if ws.spec.kernel_type.metric is Metric.TFLOPS:
        return throughput
    return throughput * ws.spec.flops / ws.spec.bytes


def _workspace_rows(ws: Workspace) -> tuple[list[str], ExperimentRecord | None, ExperimentRecord | None]:
    records = read_ledger(ws.ledger_path) if ws.ledger_path.exists() else []
    kept = [r for r in records if r.decision is Decision.KEEP]
    base = kept[0] if kept else None
    best = kept[-1] if kept else None
    s = best.throughput / base.throughput if base else None
    row = [ws.spec.name, ws.spec.kernel_type.value, str(len(records) - 1 if records else 0), str(max(0, len(kept) - 1)),
           repr(base.throughput) if base else "-", repr(best.throughput) if best else "-",
           repr(s) if s is not None else "-", repr(best.pct_of_peak) if best and best.pct_of_peak is not None else "-"]
    return row, base, best


REPORT_COLUMNS = ("kernel", "type", "experiments", "kept", "baseline_throughput", "best_throughput",
                  "speedup", "pct_peak")


def report_workspaces(workspaces: list[Workspace], out_dir: Path, summary: RunSummary | None = None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rows, points, text = [], [], []
    hw = next((w.hardware for w in workspaces if w.hardware is not None), None)
    for ws in workspaces:
        row, base, best = _workspace_rows(ws)
        rows.append(row)
        if best is not None:
            records = read_ledger(ws.ledger_path)
            written.append(plot_progress(ws, records, out_dir / f"report_progress_{ws.path.name}.png"))
            points.append((ws.spec.name, ws.spec.flops / ws.spec.bytes, _attained_flops(ws, best.throughput)))
            label, scale = _unit(ws)
            text.append(f"{ws.spec.name}: {len(records) - 1} experiments, {row[3]} kept, "
                        f"{base.throughput / scale:.4g} -> {best.throughput / scale:.4g} {label} "
                        f"(x{best.throughput / base.throughput:.3f})")
        else:
            text.append(f"{ws.spec.name}: not run")
    if hw is not None and points:
        written.append(plot_roofline(hw, points, out_dir / "report_roofline.png"))
    if summary is not None:
        written.append(plot_amdahl(summary, out_dir / "report_amdahl.png"))
        text.append("")
        text.append(summary.render().rstrip("\n"))
    tsv = out_dir / "report.tsv"
    tsv.write_text("\n".join([REPORT_MAGIC, "\t".join(REPORT_COLUMNS)] + ["\t".join(r) for r in rows]) + "\n")
    txt = out_dir / "report.txt"
    txt.write_text("\n".join(text) + "\n")
    return [txt, tsv] + written


def write_report(target: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Report on a single workspace (a directory with a spec file) or on a directory of
    workspaces, including its orchestration summary when one is present."""
    target = Path(target)
    out = Path(out_dir) if out_dir is not None else target
    if (target / SPEC_FILE).exists():
        return report_workspaces([open_workspace(target)], out)
    workspaces = list_workspaces(target)
    summary_path = target / "summary.tsv"
    summary = parse_summary(summary_path.read_text(), summary_path) if summary_path.exists() else None
    if not workspaces and summary is None:
        raise KernelloopError(f"{target} holds neither a workspace nor an orchestration run")
    return report_workspaces(workspaces, out, summary)
