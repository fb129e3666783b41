"""Minimal SVG line charts; output is deterministic text."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 180, 40, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _log_span(values):
    pos = [v for v in values if v > 0 and math.isfinite(v)]
    if not pos:
        return -1.0, 0.0
    lo, hi = math.log10(min(pos)), math.log10(max(pos))
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    return math.floor(lo), math.ceil(hi)


def _lin_span(values):
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    pad = 0.05 * (hi - lo) if hi > lo else 0.5 * max(abs(lo), 1.0)
    return lo - pad, hi + pad


def loglog_chart(x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Log-log line chart of ``series`` (name -> y values) against ``x``.

    Nonpositive points are skipped since they have no place on a log axis.
    """
    return line_chart(x, series, title, xlabel, ylabel, logy=True)


def line_chart(x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               logy: bool = False) -> str:
    """Line chart with a log-scaled x axis and a log or linear y axis."""
    x0, x1 = _log_span(x)
    flat = [v for ys in series.values() for v in ys]
    y0, y1 = _log_span(flat) if logy else _lin_span(flat)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    ty = math.log10 if logy else (lambda v: v)

    def px(v):
        return LEFT + (math.log10(v) - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + ph - (ty(v) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f"{escape(title)}</text>",
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for e in range(int(x0), int(x1) + 1):
        gx = _fmt(px(10.0**e))
        out.append(f'<line x1="{gx}" y1="{TOP}" x2="{gx}" y2="{TOP + ph}" stroke="#ddd"/>')
        out.append(f'<text x="{gx}" y="{TOP + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">1e{e}</text>')
    yticks = [(10.0**e, f"1e{e}") for e in range(int(y0), int(y1) + 1)] if logy else \
        [(y0 + j * (y1 - y0) / 4, f"{y0 + j * (y1 - y0) / 4:.4g}") for j in range(5)]
    for val, label in yticks:
        gy = _fmt(py(val))
        out.append(f'<line x1="{LEFT}" y1="{gy}" x2="{LEFT + pw}" y2="{gy}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 6}" y="{gy}" text-anchor="end" dominant-baseline="middle" '
                   f'font-family="sans-serif" font-size="11">{label}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{H - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [(px(a), py(b)) for a, b in zip(x, ys)
               if a > 0 and math.isfinite(b) and (b > 0 or not logy)]
        if len(pts) > 1:
            d = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b in pts:
            out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="3" fill="{color}"/>')
        ly = TOP + 14 + 18 * k
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly}" x2="{LEFT + pw + 32}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                   f"{escape(name)}</text>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
