"""Report serialisation: JSON, CSV and dependency-free SVG line charts."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

CSV_FIELDS = ["cell", "seed", "episode", "domain", "category", "status", "fg_iou", "final_loss", "final_n"]


def canonical_json(report: dict, drop_wall_clock: bool = False) -> str:
    body = {k: v for k, v in report.items() if not (drop_wall_clock and k == "wall_clock")}
    return json.dumps(body, indent=1, sort_keys=True, allow_nan=True)


def svg_lines(series: dict[str, list[float]], title: str, width: int = 480, height: int = 300) -> str:
    """Polyline chart, one line per named series, shared axes."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    pad = 40
    values = [v for ys in series.values() for v in ys]
    longest = max((len(ys) for ys in series.values()), default=0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2}" y="16" text-anchor="middle">{escape(title)}</text>',
        f'<rect x="{pad}" y="{pad / 2 + 8}" width="{width - 2 * pad}" height="{height - 1.5 * pad - 8}" fill="none" stroke="#888"/>',
    ]
    if values and longest > 0:
        lo, hi = min(values), max(values)
        if hi == lo:
            hi = lo + 1.0
        x0, x1 = pad, width - pad
        y0, y1 = height - pad, pad / 2 + 8

        def xy(i, v):
            x = x0 + (x1 - x0) * (i / max(longest - 1, 1))
            y = y0 + (y1 - y0) * ((v - lo) / (hi - lo))
            return f"{x:.1f},{y:.1f}"

        for n, (name, ys) in enumerate(series.items()):
            color = colors[n % len(colors)]
            pts = " ".join(xy(i, v) for i, v in enumerate(ys))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            parts.append(f'<text x="{x1 - 4}" y="{y1 + 14 * (n + 1)}" text-anchor="end" fill="{color}">{escape(name)}</text>')
        parts.append(f'<text x="{x0 - 4}" y="{y0}" text-anchor="end">{lo:.3g}</text>')
        parts.append(f'<text x="{x0 - 4}" y="{y1 + 8}" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{x1}" y="{y0 + 14}" text-anchor="end">{longest - 1}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(report: dict, out_dir, svg: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(canonical_json(report))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in report["episodes"]:
            writer.writerow(row)
    if svg:
        curves = out / "curves"
        curves.mkdir(exist_ok=True)
        if report["loss_curve"]:
            (curves / "loss.svg").write_text(svg_lines(report["loss_curve"], "mean total loss per epoch"))
        if report["scheduler_trace"]:
            (curves / "views.svg").write_text(svg_lines(report["scheduler_trace"], "mean active views per epoch"))
        table = report["per_view_iou"]
        if table.get("mean"):
            (curves / "view_iou.svg").write_text(svg_lines({"support->view IoU": table["mean"]}, "IoU by chain level"))
    return out / "report.json"
