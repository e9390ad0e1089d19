"""Run outputs: metrics/sweep CSV, a minimal SVG line chart, and report.txt.

Every file carries ``format_version``; the readers here refuse other versions.
Numbers are written with fixed precision so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

FORMAT_VERSION = 1
METRICS_HEADER = ["epoch", "split", "ir1", "ir5", "ir10", "tr1", "tr5", "tr10", "loss"]
SWEEP_HEADER = ["mid", "ir1", "tr1", "trainable_params", "status"]


class ReportFormatError(ValueError):
    pass


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def _version_line():
    return f"# format_version={FORMAT_VERSION}\n"


def _check_version(line, what):
    prefix = "# format_version="
    if not line.startswith(prefix):
        raise ReportFormatError(f"{what}: missing format_version line")
    v = line[len(prefix):].strip()
    if v != str(FORMAT_VERSION):
        raise ReportFormatError(f"{what}: format_version {v} is not supported (reader version {FORMAT_VERSION})")


def metrics_csv(history):
    """One row per (epoch, split) from a list of :class:`EpochRecord`."""
    buf = io.StringIO()
    buf.write(_version_line())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for rec in history:
        for split, m in rec.metrics.items():
            w.writerow([rec.epoch, split] + [_fmt(v) for v in m.row()])
    return buf.getvalue()


def read_csv(text, header, what="csv"):
    lines = text.splitlines(keepends=True)
    if not lines:
        raise ReportFormatError(f"{what}: empty file")
    _check_version(lines[0], what)
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != header:
        raise ReportFormatError(f"{what}: unexpected header {rows[0] if rows else None}")
    return [dict(zip(header, r)) for r in rows[1:]]


def read_metrics_csv(text):
    return read_csv(text, METRICS_HEADER, "metrics.csv")


def sweep_csv(points):
    """``points``: dicts with mid, ir1, tr1, trainable_params, status."""
    buf = io.StringIO()
    buf.write(_version_line())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for p in points:
        w.writerow([p["mid"], _fmt(p.get("ir1")), _fmt(p.get("tr1")), p["trainable_params"], p["status"]])
    return buf.getvalue()


def read_sweep_csv(text):
    return read_csv(text, SWEEP_HEADER, "sweep.csv")


def line_chart_svg(xs, series, title, x_label, y_label, width=480, height=320):
    """Polyline chart with category-spaced x ticks and a [0, 1] y axis.

    ``series`` maps a legend label to y values aligned with ``xs``; ``None``
    entries (failed points) break the line.
    """
    left, right, top, bottom = 56, 16, 32, 48
    pw, ph = width - left - right, height - top - bottom
    n = len(xs)

    def px(i):
        return left + (pw * i / (n - 1) if n > 1 else pw / 2)

    def py(y):
        return top + ph * (1.0 - y)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<!-- format_version={FORMAT_VERSION} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i, x in enumerate(xs):
        out.append(f'<text x="{px(i):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="11">{escape(str(x))}</text>')
    for k in range(6):
        y = k / 5
        out.append(f'<text x="{left - 6}" y="{py(y) + 4:.1f}" text-anchor="end" font-size="11">{y:.1f}</text>')
        out.append(f'<line x1="{left}" y1="{py(y):.1f}" x2="{left + pw}" y2="{py(y):.1f}" stroke="#ddd"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(x_label)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(y_label)}</text>')
    for j, (label, ys) in enumerate(series.items()):
        color = colors[j % len(colors)]
        run = []
        for i, y in enumerate(list(ys) + [None]):
            if y is None:
                if len(run) > 1:
                    pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in run)
                    out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
                run = []
                continue
            run.append((px(i), py(y)))
            out.append(f'<circle cx="{px(i):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 * (j + 1)
        out.append(f'<text x="{left + pw - 4}" y="{ly}" text-anchor="end" font-size="11" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_svg_version(text):
    marker = "<!-- format_version="
    start = text.find(marker)
    if start < 0:
        raise ReportFormatError("sweep.svg: missing format_version")
    v = text[start + len(marker):text.find("-->", start)].strip()
    if v != str(FORMAT_VERSION):
        raise ReportFormatError(f"sweep.svg: format_version {v} is not supported")
    return int(v)


def table(headers, rows):
    """Plain fixed-width text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_text(title, sections, seconds=None):
    """``sections`` is a list of (heading, body) pairs."""
    parts = [f"format_version: {FORMAT_VERSION}", title, "=" * len(title), ""]
    for heading, body in sections:
        parts += [heading, "-" * len(heading), body.rstrip(), ""]
    if seconds is not None:
        parts.append(f"wall_clock_seconds: {seconds:.1f}")
    return "\n".join(parts) + "\n"


def read_report_version(text):
    first = text.split("\n", 1)[0]
    if not first.startswith("format_version: "):
        raise ReportFormatError("report.txt: missing format_version")
    v = first.split(":", 1)[1].strip()
    if v != str(FORMAT_VERSION):
        raise ReportFormatError(f"report.txt: format_version {v} is not supported")
    return int(v)
