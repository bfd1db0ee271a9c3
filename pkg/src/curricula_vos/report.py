"""Run comparison tables and line plots.

A run directory is whatever ``train`` wrote: ``config.txt`` plus
``runlog.csv``. Plots are plain SVG written by hand, one ``<polyline>`` per
series, so they open anywhere and are easy to check structurally.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from . import curriculum as cur
from .trainer import RunLog, TrainConfig, read_config_file

REPORT_METRICS = ("sMOTSA", "MOTSP", "Recall", "Precision")
REPORT_COLUMNS = ("run_id", "schedule", "skip", "skip_at_gt", "skip_at_pred", "resolution", "clip_length") + REPORT_METRICS
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")


@dataclass
class Run:
    path: Path
    config: TrainConfig
    runlog: RunLog


@dataclass
class ReportRow:
    run_id: str
    schedule: str
    skip: str
    skip_at_gt: bool
    skip_at_pred: bool
    resolution: str
    clip_length: int
    sMOTSA: float
    MOTSP: float
    Recall: float
    Precision: float

    def cells(self) -> list[str]:
        return [self.run_id, self.schedule, self.skip, _yes_no(self.skip_at_gt), _yes_no(self.skip_at_pred),
                self.resolution, str(self.clip_length)] + [f"{getattr(self, m):.2f}" for m in REPORT_METRICS]


def _yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


def load_runs(root: str | Path) -> list[Run]:
    """Every directory under ``root`` (or ``root`` itself) holding a finished run."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir())
    runs = []
    for d in candidates:
        if (d / "runlog.csv").is_file() and (d / "config.txt").is_file():
            config = TrainConfig.from_mapping(read_config_file(d / "config.txt"))
            runs.append(Run(d, config, RunLog.read_csv(d / "runlog.csv")))
    return runs


def report_row(run: Run) -> ReportRow | None:
    """Metrics of the last evaluated epoch, or None if the run never evaluated."""
    evaluated = [r for r in run.runlog.records if r.metrics]
    if not evaluated:
        return None
    m = evaluated[-1].metrics
    c = run.config
    return ReportRow(
        c.run_id, c.schedule.value, c.skip.value, c.skip_at_gt, c.skip_at_pred,
        f"{c.height}x{c.width}", c.clip_length, *(m[k] for k in REPORT_METRICS),
    )


def write_rows_csv(rows: list[ReportRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.run_id, r.schedule, r.skip, _yes_no(r.skip_at_gt), _yes_no(r.skip_at_pred),
                        r.resolution, r.clip_length] + [repr(getattr(r, m)) for m in REPORT_METRICS])


def format_table(rows: list[ReportRow]) -> str:
    """Aligned text table; the best value of each metric column carries a ``*``."""
    body = [r.cells() for r in rows]
    first_metric = len(REPORT_COLUMNS) - len(REPORT_METRICS)
    for j, name in enumerate(REPORT_METRICS):
        if not rows:
            break
        best = max(getattr(r, name) for r in rows)
        for i, r in enumerate(rows):
            cell = body[i][first_metric + j]
            body[i][first_metric + j] = cell + ("*" if getattr(r, name) == best else " ")
    table = [list(REPORT_COLUMNS)] + body
    widths = [max(len(row[j]) for row in table) for j in range(len(REPORT_COLUMNS))]
    lines = []
    for n, row in enumerate(table):
        parts = [cell.ljust(w) if j < first_metric else cell.rjust(w) for j, (cell, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(parts).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------- svg

def line_plot(
    series: list[tuple[str, list[float], list[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    width: int = 640,
    height: int = 400,
) -> str:
    """An SVG document with one polyline per ``(label, xs, ys)`` series.

    Non-finite points are dropped; a series left empty still gets an
    (empty) polyline so the series count stays visible.
    """
    left, right, top, bottom = 60, 170, 36, 46
    pw, ph = width - left - right, height - top - bottom
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
    x0, x1 = (min(p[0] for p in pts), max(p[0] for p in pts)) if pts else (0.0, 1.0)
    y0, y1 = (min(p[1] for p in pts), max(p[1] for p in pts)) if pts else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
        out.append(f'<line x1="{left}" y1="{sy(yv):.1f}" x2="{left + pw}" y2="{sy(yv):.1f}" stroke="#ddd"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                          if math.isfinite(x) and math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                   f'<title>{escape(label)}</title></polyline>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def schedule_series(runs: list[Run]) -> list[tuple[str, list[float], list[float]]]:
    """Closed-form GT probability per distinct schedule among ``runs``."""
    seen, series = set(), []
    for run in runs:
        spec = run.config.schedule_spec()
        if spec in seen:
            continue
        seen.add(spec)
        epochs = list(range(spec.total_epochs))
        series.append((f"{spec.kind.value} (E={spec.total_epochs})", epochs,
                       [cur.gt_probability(spec, e) for e in epochs]))
    return series


def skip_series(runs: list[Run]) -> list[tuple[str, list[float], list[float]]]:
    """Closed-form skip per epoch for each distinct skip configuration among ``runs``."""
    seen, series = set(), []
    for run in runs:
        c = run.config
        key = (c.skip_schedule(), c.total_epochs)
        if key in seen:
            continue
        seen.add(key)
        epochs = list(range(c.total_epochs))
        skips = [cur.skip_for_epoch(key[0], e, cur.phase_for_epoch(e, c.total_epochs)) for e in epochs]
        label = f"{c.skip.value} gt={_yes_no(c.skip_at_gt)} pred={_yes_no(c.skip_at_pred)}"
        series.append((label, epochs, skips))
    return series


def metric_series(runs: list[Run], metric: str) -> list[tuple[str, list[float], list[float]]]:
    """One curve per run: ``loss`` at every epoch, other metrics at evaluated epochs."""
    series = []
    for run in runs:
        if metric == "loss":
            recs = run.runlog.records
            ys = [r.loss for r in recs]
        else:
            recs = [r for r in run.runlog.records if r.metrics]
            ys = [r.metrics[metric] for r in recs]
        series.append((run.config.run_id, [r.epoch for r in recs], ys))
    return series


def write_report(runs_dir: str | Path, out_dir: str | Path) -> list[ReportRow]:
    """Write ``report.csv``, ``report.txt`` and the SVG plots; return the table rows."""
    runs = load_runs(runs_dir)
    if not runs:
        raise FileNotFoundError(f"{runs_dir}: no finished runs (need config.txt and runlog.csv)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for r in (report_row(run) for run in runs) if r is not None]
    write_rows_csv(rows, out / "report.csv")
    (out / "report.txt").write_text(format_table(rows))
    plots = {
        "schedules.svg": (schedule_series(runs), "GT probability per schedule", "epoch", "p(GT)"),
        "skips.svg": (skip_series(runs), "Frame skip per scheme", "epoch", "skip"),
        "loss.svg": (metric_series(runs, "loss"), "Training loss", "epoch", "loss"),
    }
    for m in REPORT_METRICS:
        plots[f"{m.lower()}.svg"] = (metric_series(runs, m), f"{m} on held-out sequences", "epoch", m)
    for name, (series, title, xl, yl) in plots.items():
        (out / name).write_text(line_plot(series, title, xl, yl))
    return rows
