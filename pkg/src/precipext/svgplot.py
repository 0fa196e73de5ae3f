"""Dependency-free SVG line and scatter charts for the report stage."""

from __future__ import annotations

import math
from html import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _finite(pts):
    return [(x, y) for x, y in pts if x is not None and y is not None and math.isfinite(x) and math.isfinite(y)]


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(hi or 1):
        out.append(round(v, 12))
        v += step
    return out


class Panel:
    """One set of axes; ``render`` returns an SVG <g> translated to (x0, y0)."""

    def __init__(self, title: str, xlabel: str, ylabel: str, width=360, height=260):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.width, self.height = width, height
        self.series = []

    def line(self, pts, label: str = "", color=None, dashed=False):
        self.series.append(("line", _finite(pts), label, color, dashed))
        return self

    def scatter(self, pts, label: str = "", color=None):
        self.series.append(("scatter", _finite(pts), label, color, False))
        return self

    def diagonal(self):
        self.series.append(("diag", [], "y = x", "#999999", True))
        return self

    def _bounds(self):
        pts = [p for s in self.series for p in s[1]]
        if not pts:
            return 0.0, 1.0, 0.0, 1.0
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
        if any(s[0] == "diag" for s in self.series):
            x0 = y0 = min(x0, y0)
            x1 = y1 = max(x1, y1)
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        return x0, x1, y0, y1

    def render(self, ox: float, oy: float) -> str:
        ml, mr, mt, mb = 52, 12, 26, 40
        pw, ph = self.width - ml - mr, self.height - mt - mb
        x0, x1, y0, y1 = self._bounds()
        sx = lambda x: ml + (x - x0) / (x1 - x0) * pw  # noqa: E731
        sy = lambda y: mt + ph - (y - y0) / (y1 - y0) * ph  # noqa: E731
        out = [f'<g transform="translate({ox:.1f},{oy:.1f})" font-family="sans-serif" font-size="10">']
        out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
        out.append(f'<text x="{ml + pw / 2:.1f}" y="16" text-anchor="middle" font-size="12">{escape(self.title)}</text>')
        for t in _ticks(x0, x1):
            out.append(f'<line x1="{sx(t):.1f}" y1="{mt + ph}" x2="{sx(t):.1f}" y2="{mt + ph + 4}" stroke="#333"/>')
            out.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 14}" text-anchor="middle">{t:g}</text>')
        for t in _ticks(y0, y1):
            out.append(f'<line x1="{ml - 4}" y1="{sy(t):.1f}" x2="{ml}" y2="{sy(t):.1f}" stroke="#333"/>')
            out.append(f'<text x="{ml - 6}" y="{sy(t) + 3:.1f}" text-anchor="end">{t:g}</text>')
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{self.height - 6}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(
            f'<text x="12" y="{mt + ph / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 12 {mt + ph / 2:.1f})">{escape(self.ylabel)}</text>'
        )
        legend_y = mt + 12
        for i, (kind, pts, label, color, dashed) in enumerate(self.series):
            color = color or PALETTE[i % len(PALETTE)]
            dash = ' stroke-dasharray="4 3"' if dashed else ""
            if kind == "diag":
                lo, hi = max(x0, y0), min(x1, y1)
                out.append(f'<line x1="{sx(lo):.1f}" y1="{sy(lo):.1f}" x2="{sx(hi):.1f}" y2="{sy(hi):.1f}" '
                           f'stroke="{color}"{dash}/>')
            elif kind == "line" and pts:
                d = " ".join(f"{'M' if j == 0 else 'L'}{sx(x):.1f},{sy(y):.1f}" for j, (x, y) in enumerate(pts))
                out.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
            else:
                out.extend(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2" fill="{color}"/>' for x, y in pts)
            if label:
                out.append(f'<line x1="{ml + pw - 70}" y1="{legend_y - 3}" x2="{ml + pw - 58}" y2="{legend_y - 3}" '
                           f'stroke="{color}" stroke-width="2"{dash}/>')
                out.append(f'<text x="{ml + pw - 54}" y="{legend_y}">{escape(label)}</text>')
                legend_y += 12
        out.append("</g>")
        return "\n".join(out)


def figure(panels: list[Panel], columns: int = 3, title: str = "") -> str:
    """Arrange panels on a grid and return a standalone SVG document."""
    if not panels:
        panels = [Panel("no data", "", "")]
    w, h = panels[0].width, panels[0].height
    cols = min(columns, len(panels))
    rows = math.ceil(len(panels) / cols)
    top = 24 if title else 0
    W, H = cols * w, rows * h + top
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>']
    if title:
        body.append(f'<text x="{W / 2}" y="16" text-anchor="middle" font-family="sans-serif" '
                    f'font-size="14">{escape(title)}</text>')
    for i, p in enumerate(panels):
        body.append(p.render((i % cols) * w, top + (i // cols) * h))
    body.append("</svg>")
    return "\n".join(body) + "\n"
