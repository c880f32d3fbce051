"""Minimal SVG line charts for metric decline curves."""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

# fixed y ranges so charts from different runs line up
AXIS_LIMITS = {"fdr": (0.0, 40.0), "adr": (0.0, 25.0), "ea": (0.0, 12.0)}
AXIS_LABELS = {"fdr": "FDR (%)", "adr": "ADR (%)", "ea": "EA (deg)"}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")

W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 20, 45


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def decline_svg(metric: str, series: Mapping[str, Sequence[float]], n_iter: int | None = None) -> str:
    """One polyline per named series over the iteration axis."""
    lo, hi = AXIS_LIMITS.get(metric, (0.0, max((max(s) for s in series.values() if len(s)), default=1.0)))
    n = n_iter if n_iter is not None else max((len(s) for s in series.values()), default=1)
    xmax = max(n - 1, 1)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(i):
        return LEFT + pw * i / xmax

    def py(v):
        v = min(max(v, lo), hi)
        return TOP + ph * (1.0 - (v - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = py(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{_fmt(y)}" x2="{LEFT}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_fmt(y + 4)}" font-size="11" text-anchor="end">{v:g}</text>')
    for k in range(5):
        i = xmax * k / 4
        out.append(f'<text x="{_fmt(px(i))}" y="{TOP + ph + 16}" font-size="11" text-anchor="middle">{i:g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:g}" y="{H - 8}" font-size="12" text-anchor="middle">iteration</text>')
    label = escape(AXIS_LABELS.get(metric, metric))
    out.append(f'<text x="14" y="{TOP + ph / 2:g}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {TOP + ph / 2:g})">{label}</text>')
    for k, (name, values) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        if len(values) == 1:
            pts = f"{_fmt(px(0))},{_fmt(py(values[0]))} {_fmt(px(xmax))},{_fmt(py(values[0]))}"
            dash = ' stroke-dasharray="6 4"'
        else:
            pts = " ".join(f"{_fmt(px(i))},{_fmt(py(v))}" for i, v in enumerate(values))
            dash = ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{pts}"/>')
        out.append(f'<text x="{LEFT + pw - 4}" y="{TOP + 14 + 14 * k}" font-size="11" text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
