"""Summary tables and dependency-free SVG charts built from run CSVs."""

from __future__ import annotations

import csv
import glob
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

from .analysis import spearman

logger = logging.getLogger(__name__)

WIDTH, HEIGHT, PAD = 480, 360, 56


def _ticks(lo: float, hi: float, count: int = 5) -> List[float]:
    if hi == lo:
        return [lo]
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def _bounds(values: Sequence[float]) -> Tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    margin = 0.05 * (hi - lo)
    return lo - margin, hi + margin


class _Axes:
    def __init__(self, xs, ys):
        self.x0, self.x1 = _bounds(xs)
        self.y0, self.y1 = _bounds(ys)

    def x(self, v):
        return PAD + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * PAD)

    def y(self, v):
        return HEIGHT - PAD - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * PAD)


def _frame(axes: _Axes, xlabel: str, ylabel: str, title: str, right_label: str = "") -> List[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]
    if right_label:
        out.append(f'<line x1="{WIDTH - PAD}" y1="{PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>')
        out.append(f'<text x="{WIDTH - 12}" y="{HEIGHT / 2}" text-anchor="middle" '
                   f'transform="rotate(90 {WIDTH - 12} {HEIGHT / 2})">{escape(right_label)}</text>')
    for t in _ticks(axes.x0, axes.x1):
        out.append(f'<text x="{axes.x(t):.1f}" y="{HEIGHT - PAD + 16}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(axes.y0, axes.y1):
        out.append(f'<text x="{PAD - 6}" y="{axes.y(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    return out


def scatter_svg(xs: Sequence[float], ys: Sequence[float], xlabel: str, ylabel: str,
                title: str = "", annotation: str = "") -> str:
    if len(xs) != len(ys) or not xs:
        raise ValueError("need matching, non-empty x and y")
    axes = _Axes(xs, ys)
    out = _frame(axes, xlabel, ylabel, title)
    for x, y in zip(xs, ys):
        out.append(f'<circle cx="{axes.x(x):.1f}" cy="{axes.y(y):.1f}" r="4" fill="steelblue"/>')
    if annotation:
        out.append(f'<text x="{WIDTH - PAD}" y="{PAD - 8}" text-anchor="end">{escape(annotation)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def dual_axis_svg(xs: Sequence[float], left: Sequence[float], right: Sequence[float],
                  xlabel: str, left_label: str, right_label: str, title: str = "") -> str:
    """Two polylines sharing the x axis, each scaled to its own y range."""
    if not (len(xs) == len(left) == len(right)) or not xs:
        raise ValueError("need matching, non-empty series")
    axes = _Axes(xs, left)
    raxes = _Axes(xs, right)
    out = _frame(axes, xlabel, left_label, title, right_label)
    for t in _ticks(raxes.y0, raxes.y1):
        out.append(f'<text x="{WIDTH - PAD + 6}" y="{raxes.y(t) + 4:.1f}">{t:.3g}</text>')
    for ax, series, color in ((axes, left, "steelblue"), (raxes, right, "darkorange")):
        pts = " ".join(f"{ax.x(x):.1f},{ax.y(y):.1f}" for x, y in zip(xs, series))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, series):
            out.append(f'<circle cx="{ax.x(x):.1f}" cy="{ax.y(y):.1f}" r="3" fill="{color}"/>')
    out.append(f'<text x="{PAD + 8}" y="{PAD - 8}" fill="steelblue">{escape(left_label)}</text>')
    out.append(f'<text x="{WIDTH - PAD - 8}" y="{PAD - 8}" text-anchor="end" fill="darkorange">{escape(right_label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def collect_runs(run_dir) -> List[dict]:
    """One row per finished run below ``run_dir`` (metrics.json files)."""
    rows = []
    for path in sorted(glob.glob(os.path.join(run_dir, "*", "metrics.json"))):
        with open(path) as f:
            saved = json.load(f)
        rep = saved["report"]
        rows.append({"run": os.path.basename(os.path.dirname(path)), "name": rep.get("name", ""),
                     "rep2": rep["rep_n"].get("2"), "ppl": rep.get("ppl"), "valid_ppl": saved.get("valid_ppl"),
                     "train_rep2": saved.get("train_rep2")})
    return rows


def build_report(run_dir, out_dir: Optional[str] = None) -> Dict[str, object]:
    """Write summary CSVs and SVG charts for whatever runs exist.

    Missing inputs produce warnings, not errors; the returned dict lists
    written files and warnings.
    """
    out_dir = out_dir or os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    written, warnings = [], []

    runs = collect_runs(run_dir)
    if runs:
        path = os.path.join(out_dir, "runs.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(runs[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(sorted(runs, key=lambda r: r["name"]))
        written.append(path)
    else:
        warnings.append("no finished runs found")

    shard_csvs = sorted(glob.glob(os.path.join(run_dir, "shards-*", "shards.csv")))
    if shard_csvs:
        rows = _read_csv(shard_csvs[-1])
        xs = [100 * float(r["shard_rep2"]) for r in rows]
        ys = [100 * float(r["generated_rep2"]) for r in rows]
        note = f"Spearman rho = {spearman(xs, ys):.3f}" if len(rows) > 1 else ""
        path = os.path.join(out_dir, "shard_scatter.svg")
        with open(path, "w") as f:
            f.write(scatter_svg(xs, ys, "training shard rep-2 (%)", "generated rep-2 (%)",
                                "Repetition in data vs generations", note))
        written.append(path)
    else:
        warnings.append("no shard runs found")

    sweep_rows = sweep_table(runs)
    if len(sweep_rows) > 1:
        path = os.path.join(out_dir, "sweep.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["p", "rep2", "ppl", "valid_ppl"], lineterminator="\n")
            w.writeheader()
            w.writerows(sweep_rows)
        written.append(path)
        path = os.path.join(out_dir, "sweep.svg")
        with open(path, "w") as f:
            f.write(dual_axis_svg([r["p"] for r in sweep_rows], [100 * r["rep2"] for r in sweep_rows],
                                  [r["valid_ppl"] or r["ppl"] for r in sweep_rows], "dropout rate p",
                                  "rep-2 (%)", "validation PPL" if sweep_rows[0]["valid_ppl"] else "PPL",
                                  "Repetition dropout rate sweep"))
        written.append(path)
    else:
        warnings.append("no dropout-rate sweep found")
    for msg in warnings:
        logger.warning(msg)
    return {"written": written, "warnings": warnings}


def sweep_table(runs: Sequence[dict]) -> List[dict]:
    """Rate -> metrics from run names: ``mle`` is rate 0, ``rep_dropout`` 0.6,
    ``rep_dropout_p<rate>`` the rest."""
    rows = {}
    for r in runs:
        name = r["name"]
        if name == "mle":
            p = 0.0
        elif name == "rep_dropout":
            p = 0.6
        elif name.startswith("rep_dropout_p"):
            p = float(name[len("rep_dropout_p"):])
        else:
            continue
        rows[p] = {"p": p, "rep2": r["rep2"], "ppl": r["ppl"], "valid_ppl": r.get("valid_ppl")}
    return [rows[p] for p in sorted(rows)]
