"""CSV tables and standalone SVG figures for evaluation runs.

Floats are written with ``repr`` so parsing a CSV back yields the exact
in-memory values, and SVG coordinates use fixed precision so regenerated
figures are byte-identical.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MammosegError
from .metrics import (RocCurve, box_stats, micro_accuracy, overall_accuracy,
                      per_class_recall)
from .phantom import SHAPE_LABELS

ACCURACY_NOTE = (
    "overall accuracy is the macro mean of per-class recalls; the sample-weighted "
    "(micro) accuracy is listed separately and differs under class imbalance"
)

LOSS_COLUMNS = ["epoch", "gen_loss", "disc_loss", "dice_term", "adv_term"]


@dataclass
class EvalReport:
    rows: List[Tuple[str, float, float]] = field(default_factory=list)
    confusion: Optional[np.ndarray] = None
    roc: Optional[RocCurve] = None
    loss_history: Optional[List[dict]] = None
    notes: List[str] = field(default_factory=list)

    def summary(self) -> List[Tuple[str, object]]:
        out: List[Tuple[str, object]] = []
        if self.rows:
            for col, metric in ((1, "dice"), (2, "iou")):
                b = box_stats([r[col] for r in self.rows])
                out += [(f"{metric}_n", b.n), (f"{metric}_mean", b.mean),
                        (f"{metric}_median", b.median), (f"{metric}_q1", b.q1),
                        (f"{metric}_q3", b.q3), (f"{metric}_whisker_low", b.whisker_low),
                        (f"{metric}_whisker_high", b.whisker_high),
                        (f"{metric}_min", b.minimum), (f"{metric}_max", b.maximum)]
        if self.confusion is not None:
            rec = per_class_recall(self.confusion)
            out += [(f"recall_{name}", float(r)) for name, r in zip(SHAPE_LABELS, rec)]
            out += [("macro_accuracy_percent", overall_accuracy(self.confusion)),
                    ("micro_accuracy_percent", micro_accuracy(self.confusion)),
                    ("note", ACCURACY_NOTE)]
        if self.roc is not None:
            out.append(("auc", self.roc.auc))
        out += [("note", n) for n in self.notes]
        return out


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_loss_csv(history: List[dict], path) -> None:
    write_csv(path, LOSS_COLUMNS, [[h[c] for c in LOSS_COLUMNS] for h in history])


# -- SVG ----------------------------------------------------------------------

class _Svg:
    def __init__(self, width: int = 480, height: int = 360, margin: int = 48):
        self.w, self.h, self.m = width, height, margin
        self.parts: List[str] = []

    def frame(self, title: str, x_label: str, y_label: str) -> None:
        m, w, h = self.m, self.w, self.h
        self.parts.append(f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" '
                          'fill="none" stroke="#000"/>')
        self.text(w / 2, m / 2, title, size=14)
        self.text(w / 2, h - 10, x_label)
        self.parts.append(f'<text x="14" y="{h / 2:.2f}" font-size="12" text-anchor="middle" '
                          f'transform="rotate(-90 14 {h / 2:.2f})">{y_label}</text>')

    def sx(self, u: float) -> float:
        return self.m + u * (self.w - 2 * self.m)

    def sy(self, v: float) -> float:
        return self.h - self.m - v * (self.h - 2 * self.m)

    def text(self, x, y, s, size=12, anchor="middle") -> None:
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" '
                          f'text-anchor="{anchor}">{s}</text>')

    def line(self, x1, y1, x2, y2, color="#000", dash=False) -> None:
        d = ' stroke-dasharray="4 3"' if dash else ""
        self.parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                          f'stroke="{color}"{d}/>')

    def polyline(self, pts, color) -> None:
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="#fff"/>', *self.parts, "</svg>", ""])


def _ticks(svg: _Svg, lo: float, hi: float, n: int = 5) -> None:
    for i in range(n + 1):
        v = i / n
        y = svg.sy(v)
        svg.line(svg.m - 4, y, svg.m, y)
        svg.text(svg.m - 6, y + 4, f"{lo + v * (hi - lo):.2f}", size=10, anchor="end")


def boxplot_svg(groups: Dict[str, Sequence[float]], title: str = "Dice / IoU") -> str:
    svg = _Svg()
    svg.frame(title, "", "score")
    _ticks(svg, 0.0, 1.0)
    k = len(groups)
    for i, (name, values) in enumerate(groups.items()):
        b = box_stats(values)
        cx = svg.sx((i + 0.5) / k)
        half = 0.15 * (svg.w - 2 * svg.m) / k
        y = lambda v: svg.sy(min(max(v, 0.0), 1.0))
        svg.line(cx, y(b.whisker_low), cx, y(b.q1))
        svg.line(cx, y(b.q3), cx, y(b.whisker_high))
        svg.line(cx - half / 2, y(b.whisker_low), cx + half / 2, y(b.whisker_low))
        svg.line(cx - half / 2, y(b.whisker_high), cx + half / 2, y(b.whisker_high))
        svg.parts.append(f'<rect x="{cx - half:.2f}" y="{y(b.q3):.2f}" width="{2 * half:.2f}" '
                         f'height="{y(b.q1) - y(b.q3):.2f}" fill="#cde" stroke="#000"/>')
        svg.line(cx - half, y(b.median), cx + half, y(b.median), color="#c00")
        for o in b.outliers:
            svg.parts.append(f'<circle cx="{cx:.2f}" cy="{y(o):.2f}" r="2.5" fill="none" stroke="#000"/>')
        svg.text(cx, svg.h - svg.m + 16, name)
    return svg.render()


def roc_svg(curves: Dict[str, RocCurve], title: str = "ROC") -> str:
    svg = _Svg()
    svg.frame(title, "false positive rate", "true positive rate")
    _ticks(svg, 0.0, 1.0)
    svg.line(svg.sx(0), svg.sy(0), svg.sx(1), svg.sy(1), color="#888", dash=True)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    for i, (name, c) in enumerate(curves.items()):
        color = colors[i % len(colors)]
        svg.polyline([(svg.sx(f), svg.sy(t)) for f, t in zip(c.fpr, c.tpr)], color)
        svg.text(svg.sx(0.62), svg.sy(0.1 + 0.07 * i), f"{name} AUC={c.auc:.3f}", anchor="start")
    return svg.render()


def curves_svg(series: Dict[str, Sequence[Tuple[float, float]]], title: str,
               x_label: str, y_label: str) -> str:
    svg = _Svg()
    svg.frame(title, x_label, y_label)
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        return svg.render()
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    _ticks(svg, y0, y1)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    for i, (name, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        svg.polyline([(svg.sx((x - x0) / (x1 - x0)), svg.sy((y - y0) / (y1 - y0))) for x, y in pts], color)
        svg.text(svg.w - svg.m - 4, svg.m + 16 + 14 * i, name, anchor="end")
    return svg.render()


def loss_svg(history: List[dict], keys: Sequence[str] = ("gen_loss", "disc_loss")) -> str:
    series = {k: [(h["epoch"], h[k]) for h in history] for k in keys}
    return curves_svg(series, "training loss", "epoch", "loss")


def emit_report(report: EvalReport, out_dir) -> Dict[str, Path]:
    """Write every table and figure the report has data for; returns their paths."""
    root = Path(out_dir)
    files: Dict[str, Path] = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        if report.rows:
            files["per_sample"] = root / "per_sample.csv"
            write_csv(files["per_sample"], ["filename", "dice", "iou"], report.rows)
            files["boxplot"] = root / "boxplot.svg"
            files["boxplot"].write_text(boxplot_svg({
                "Dice": [r[1] for r in report.rows], "IoU": [r[2] for r in report.rows]}))
        files["summary"] = root / "summary.csv"
        write_csv(files["summary"], ["metric", "value"], report.summary())
        if report.confusion is not None:
            files["confusion"] = root / "confusion.csv"
            write_csv(files["confusion"], ["truth\\pred", *SHAPE_LABELS],
                      [[name, *map(int, row)] for name, row in zip(SHAPE_LABELS, report.confusion)])
        if report.roc is not None:
            files["roc"] = root / "roc.csv"
            write_csv(files["roc"], ["fpr", "tpr", "threshold"],
                      zip(report.roc.fpr, report.roc.tpr, report.roc.thresholds))
            files["roc_svg"] = root / "roc.svg"
            files["roc_svg"].write_text(roc_svg({"micro": report.roc}))
        if report.loss_history:
            files["loss"] = root / "loss.csv"
            write_loss_csv(report.loss_history, files["loss"])
            files["loss_svg"] = root / "loss.svg"
            files["loss_svg"].write_text(loss_svg(report.loss_history))
    except OSError as exc:
        raise MammosegError(f"cannot write report under {root}: {exc}") from exc
    return files
