"""Seed aggregation and static CSV/SVG reports."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import DataError
from .harness import MetricsRecord

KINDS = ("tpr", "f1", "fpr", "degradation", "robustness")
_METRIC = {"tpr": "tpr", "f1": "f1", "fpr": "fpr", "degradation": "tpr", "robustness": "tpr"}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
AGG_HEADER = ["series", "method", "test_period", "fpr_target", "mean", "sem", "n_seeds"]


@dataclass(frozen=True)
class AggregateRow:
    method: str
    test_period: int
    fpr_target: float
    mean: float
    sem: float
    n_seeds: int
    split_k: int | None = None  # set when series are per training window

    @property
    def series(self) -> str:
        return self.method if self.split_k is None else f"k={self.split_k}"


def mean_sem(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    m = float(math.fsum(v) / len(v))
    if len(v) < 2:
        return m, 0.0
    var = math.fsum((v - m) ** 2) / (len(v) - 1)
    return m, math.sqrt(var) / math.sqrt(len(v))


def aggregate(records: Iterable[MetricsRecord], metric: str = "tpr", by_split: bool = False) -> list[AggregateRow]:
    """Mean and standard error over seeds per (method, test period, target).

    Undefined (nan) values are left out; ``by_split`` keeps training windows apart.
    """
    groups: dict[tuple, list[float]] = {}
    n = 0
    for r in records:
        n += 1
        v = getattr(r, metric)
        if isinstance(v, float) and math.isnan(v):
            continue
        key = (r.split_k if by_split else None, r.method, r.test_period, r.fpr_target)
        groups.setdefault(key, []).append(v)
    if n == 0:
        raise DataError("no records to aggregate")
    out = []
    for key in sorted(groups, key=lambda k: (-1 if k[0] is None else k[0], k[1], k[2], k[3])):
        k, method, period, target = key
        # sorted values make the float sums independent of record order
        m, s = mean_sem(sorted(groups[key]))
        out.append(AggregateRow(method, period, target, m, s, len(groups[key]), k))
    return out


def write_aggregates(rows: Sequence[AggregateRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_HEADER)
        for r in rows:
            w.writerow([r.series, r.method, r.test_period, repr(r.fpr_target), repr(r.mean), repr(r.sem), r.n_seeds])


def read_aggregates(path: str | Path) -> list[AggregateRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != AGG_HEADER:
            raise DataError(f"{path}: unexpected aggregate header")
        out = []
        for series, method, period, target, mean, sem, n in reader:
            k = int(series[2:]) if series.startswith("k=") and series != method else None
            out.append(AggregateRow(method, int(period), float(target), float(mean), float(sem), int(n), k))
        return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(rows: Sequence[AggregateRow], title: str, y_label: str,
               expected_series: Sequence[str] = ()) -> str:
    """Line chart: x = test period, y in [0, 1], band = mean +- sem, one series per method or window."""
    series: dict[str, list[AggregateRow]] = {}
    for r in rows:
        series.setdefault(r.series, []).append(r)
    missing = [s for s in expected_series if s not in series]
    if missing:
        warnings.warn(f"chart {title!r} lacks series: {', '.join(missing)}", stacklevel=2)
    W, H = 720, 420
    left, right, top, bottom = 60, 170, 40, 50
    pw, ph = W - left - right, H - top - bottom
    periods = sorted({r.test_period for r in rows}) or [0]
    x0, x1 = periods[0], periods[-1]

    def sx(p):
        return left + (pw / 2 if x1 == x0 else (p - x0) / (x1 - x0) * pw)

    def sy(v):
        return top + (1.0 - v) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">'
        f"{escape(title)}</text>",
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for i in range(6):
        v = i / 5
        out.append(f'<line x1="{left}" y1="{_fmt(sy(v))}" x2="{left + pw}" y2="{_fmt(sy(v))}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(sy(v) + 4)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{v:.1f}</text>')
    for p in periods:
        out.append(f'<text x="{_fmt(sx(p))}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{p}</text>')
    out.append(f'<text x="{left + pw / 2:.0f}" y="{H - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">test period</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.0f})">{escape(y_label)}</text>')
    for idx, name in enumerate(sorted(series)):
        pts = sorted(series[name], key=lambda r: r.test_period)
        color = PALETTE[idx % len(PALETTE)]
        upper = [f"{_fmt(sx(r.test_period))},{_fmt(sy(r.mean + r.sem))}" for r in pts]
        lower = [f"{_fmt(sx(r.test_period))},{_fmt(sy(r.mean - r.sem))}" for r in reversed(pts)]
        out.append(f'<g class="series" data-series="{escape(name)}">')
        out.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{color}" '
                   f'fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_fmt(sx(r.test_period))},{_fmt(sy(r.mean))}" for r in pts)
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in pts:
            out.append(f'<circle cx="{_fmt(sx(r.test_period))}" cy="{_fmt(sy(r.mean))}" r="3" fill="{color}" '
                       f'data-period="{r.test_period}" data-mean="{r.mean!r}" data-sem="{r.sem!r}"/>')
        out.append("</g>")
        ly = top + 14 + 18 * idx
        out.append(f'<g class="legend"><line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 36}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{left + pw + 42}" y="{ly + 4}" '
                   f'font-family="sans-serif" font-size="12">{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def default_target(rows: Sequence[AggregateRow]) -> float:
    targets = sorted({r.fpr_target for r in rows})
    if not targets:
        raise DataError("no aggregates to report")
    return 0.01 if 0.01 in targets else targets[0]


def emit_report(aggregates: Sequence[AggregateRow], kind: str, out_dir: str | Path,
                fpr_target: float | None = None, expected_series: Sequence[str] = ()) -> tuple[Path, Path]:
    """Write ``<kind>.csv`` (all targets) and ``<kind>.svg`` (one target)."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    rows = list(aggregates)
    if kind == "robustness":
        rows = [r for r in rows if "@" in r.method] or rows
    if not rows:
        raise DataError(f"no aggregates for the {kind} report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{kind}.csv"
    write_aggregates(rows, csv_path)
    target = default_target(rows) if fpr_target is None else fpr_target
    chosen = [r for r in rows if r.fpr_target == target]
    if not chosen:
        raise DataError(f"no aggregates at fpr target {target}")
    metric = _METRIC[kind].upper()
    title = f"{kind}: {metric} at FPR target {target:g}"
    svg_path = out_dir / f"{kind}.svg"
    svg_path.write_text(render_svg(chosen, title, metric, expected_series))
    return csv_path, svg_path


def report_from_records(records: Sequence[MetricsRecord], kind: str, out_dir: str | Path,
                        fpr_target: float | None = None) -> tuple[Path, Path]:
    rows = aggregate(records, _METRIC[kind], by_split=(kind == "degradation"))
    return emit_report(rows, kind, out_dir, fpr_target)
