"""Minimal self-contained SVG emitters for reports.

Every chart the package writes also has a CSV twin, so nothing depends on
the graphics; these exist for quick visual inspection.
"""

from __future__ import annotations

import math

PALETTE = ["#2563eb", "#dc2626", "#16a34a", "#9333ea", "#ea580c",
           "#0891b2", "#737373"]
FONT = "font-family='Helvetica, Arial, sans-serif'"


def _header(width, height):
    return (f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' "
            f"height='{height}' viewBox='0 0 {width} {height}'>"
            f"<rect width='{width}' height='{height}' fill='white'/>")


def _scale(values, lo_px, hi_px, log=False):
    vals = [math.log10(v) for v in values] if log else list(values)
    vmin, vmax = min(vals), max(vals)
    span = (vmax - vmin) or 1.0

    def to_px(v):
        v = math.log10(v) if log else v
        return lo_px + (v - vmin) / span * (hi_px - lo_px)

    return to_px


def line_chart(xs, series, title="", x_label="", y_label="",
               log_x=False, log_y=False, width=640, height=420):
    """Polyline chart: ``series`` maps name -> list of y values over xs."""
    left, right, top, bottom = 70, 20, 40, 50
    all_y = [y for ys in series.values() for y in ys]
    sx = _scale(xs, left, width - right, log_x)
    sy = _scale(all_y, height - bottom, top, log_y)
    parts = [_header(width, height)]
    parts.append(f"<text x='{width / 2}' y='20' text-anchor='middle' "
                 f"{FONT} font-size='15'>{title}</text>")
    parts.append(f"<line x1='{left}' y1='{height - bottom}' "
                 f"x2='{width - right}' y2='{height - bottom}' "
                 f"stroke='#333'/>")
    parts.append(f"<line x1='{left}' y1='{top}' x2='{left}' "
                 f"y2='{height - bottom}' stroke='#333'/>")
    for x in xs:
        px = sx(x)
        parts.append(f"<text x='{px}' y='{height - bottom + 18}' "
                     f"text-anchor='middle' {FONT} font-size='11'>{x}</text>")
    lo, hi = min(all_y), max(all_y)
    for v in (lo, (lo + hi) / 2, hi):
        py = sy(v)
        label = f"{v:.3g}"
        parts.append(f"<text x='{left - 6}' y='{py + 4}' text-anchor='end' "
                     f"{FONT} font-size='11'>{label}</text>")
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f"<polyline points='{pts}' fill='none' "
                     f"stroke='{color}' stroke-width='2'/>")
        for x, y in zip(xs, ys):
            parts.append(f"<circle cx='{sx(x):.1f}' cy='{sy(y):.1f}' r='3' "
                         f"fill='{color}'/>")
        parts.append(f"<text x='{width - right - 4}' "
                     f"y='{top + 16 * i + 12}' text-anchor='end' {FONT} "
                     f"font-size='12' fill='{color}'>{name}</text>")
    parts.append(f"<text x='{width / 2}' y='{height - 8}' "
                 f"text-anchor='middle' {FONT} font-size='12'>{x_label}"
                 f"</text>")
    parts.append(f"<text x='16' y='{height / 2}' {FONT} font-size='12' "
                 f"transform='rotate(-90 16 {height / 2})' "
                 f"text-anchor='middle'>{y_label}</text>")
    parts.append("</svg>")
    return "".join(parts)


def bar_chart(labels, values, title="", y_label="", width=640, height=420):
    left, right, top, bottom = 70, 20, 40, 70
    vmax = max(max(values), 1e-12)
    inner = width - left - right
    slot = inner / len(values)
    parts = [_header(width, height)]
    parts.append(f"<text x='{width / 2}' y='20' text-anchor='middle' "
                 f"{FONT} font-size='15'>{title}</text>")
    parts.append(f"<line x1='{left}' y1='{height - bottom}' "
                 f"x2='{width - right}' y2='{height - bottom}' "
                 f"stroke='#333'/>")
    for i, (label, v) in enumerate(zip(labels, values)):
        h = (height - bottom - top) * v / vmax
        x = left + i * slot + slot * 0.15
        y = height - bottom - h
        color = PALETTE[i % len(PALETTE)]
        parts.append(f"<rect x='{x:.1f}' y='{y:.1f}' "
                     f"width='{slot * 0.7:.1f}' height='{h:.1f}' "
                     f"fill='{color}'/>")
        parts.append(f"<text x='{x + slot * 0.35:.1f}' y='{y - 5:.1f}' "
                     f"text-anchor='middle' {FONT} font-size='11'>"
                     f"{v:.4g}</text>")
        parts.append(f"<text x='{x + slot * 0.35:.1f}' "
                     f"y='{height - bottom + 16}' text-anchor='middle' "
                     f"{FONT} font-size='11'>{label}</text>")
    parts.append(f"<text x='16' y='{height / 2}' {FONT} font-size='12' "
                 f"transform='rotate(-90 16 {height / 2})' "
                 f"text-anchor='middle'>{y_label}</text>")
    parts.append("</svg>")
    return "".join(parts)


def circle_grid(matrix, row_labels=None, col_label="capsule", title="",
                cell=26):
    """Filled-circle grid: fill fraction of each circle is the cell value
    (values in [0, 1])."""
    rows = len(matrix)
    cols = len(matrix[0]) if rows else 0
    left, top = 90, 50
    width = left + cols * cell + 20
    height = top + rows * cell + 30
    parts = [_header(width, height)]
    parts.append(f"<text x='{width / 2}' y='22' text-anchor='middle' "
                 f"{FONT} font-size='14'>{title}</text>")
    r_outer = cell * 0.40
    for i, row in enumerate(matrix):
        cy = top + i * cell + cell / 2
        label = row_labels[i] if row_labels else str(i)
        parts.append(f"<text x='{left - 8}' y='{cy + 4}' text-anchor='end' "
                     f"{FONT} font-size='11'>{label}</text>")
        for j, v in enumerate(row):
            cx = left + j * cell + cell / 2
            parts.append(f"<circle cx='{cx}' cy='{cy}' r='{r_outer:.1f}' "
                         f"fill='none' stroke='#555'/>")
            r_fill = r_outer * math.sqrt(max(0.0, min(1.0, float(v))))
            if r_fill > 0:
                parts.append(f"<circle cx='{cx}' cy='{cy}' "
                             f"r='{r_fill:.2f}' fill='#2563eb' "
                             f"fill-opacity='0.85'/>")
    parts.append(f"<text x='{left + cols * cell / 2}' y='{height - 8}' "
                 f"text-anchor='middle' {FONT} font-size='11'>{col_label}"
                 f"</text>")
    parts.append("</svg>")
    return "".join(parts)
