"""Tiny SVG line plotter: lines, optional log axes, error bands, a legend.

CSV files are the canonical outputs; these plots are a convenience view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    band: tuple[Sequence[float], Sequence[float]] | None = None  # (low, high)
    dashed: bool = False


@dataclass
class Axes:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    logx: bool = False
    logy: bool = False
    series: list[Series] = field(default_factory=list)

    def add(self, *args, **kw) -> "Axes":
        self.series.append(Series(*args, **kw))
        return self


def _finite(v, log_scale):
    return v is not None and math.isfinite(v) and (v > 0 or not log_scale)


def _ticks(lo: float, hi: float, log_scale: bool) -> list[float]:
    if log_scale:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        step = max(1, (b - a) // 6)
        return [10.0 ** k for k in range(a, b + 1, step)]
    span = hi - lo or 1.0
    raw = span / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out, t = [], start
    while t <= hi + 1e-12 * span:
        out.append(round(t, 12))
        t += step
    return out


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


def render(ax: Axes, width: int = 640, height: int = 420) -> str:
    left, right, top, bottom = 70, 160, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xs = [v for s in ax.series for v in s.x if _finite(v, ax.logx)]
    ys = [v for s in ax.series for v in s.y if _finite(v, ax.logy)]
    for s in ax.series:
        if s.band:
            ys += [v for b in s.band for v in b if _finite(v, ax.logy)]
    if not xs or not ys:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 == x1:
        x0, x1 = (x0 / 2, x0 * 2) if ax.logx else (x0 - 1, x1 + 1)
    if y0 == y1:
        y0, y1 = (y0 / 2, y0 * 2) if ax.logy else (y0 - 1, y1 + 1)
    fx = math.log10 if ax.logx else float
    fy = math.log10 if ax.logy else float

    def px(v):
        return left + (fx(v) - fx(x0)) / (fx(x1) - fx(x0)) * pw

    def py(v):
        return top + ph - (fy(v) - fy(y0)) / (fy(y1) - fy(y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1, ax.logx):
        if x0 <= t <= x1:
            x = px(t)
            out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="#444"/>')
            out.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1, ax.logy):
        if y0 <= t <= y1:
            y = py(t)
            out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
            out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    for i, s in enumerate(ax.series):
        color = PALETTE[i % len(PALETTE)]
        if s.band:
            lo, hi = s.band
            pts = [(px(x), py(h)) for x, h in zip(s.x, hi) if _finite(h, ax.logy)]
            pts += [(px(x), py(v)) for x, v in reversed(list(zip(s.x, lo))) if _finite(v, ax.logy)]
            if pts:
                path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
                out.append(f'<polygon points="{path}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        pts = [(px(x), py(y)) for x, y in zip(s.x, s.y)
               if _finite(x, ax.logx) and _finite(y, ax.logy)]
        if pts:
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            dash = ' stroke-dasharray="6,4"' if s.dashed else ""
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
            for a, b in pts:
                out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(s.label)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{top - 14}" text-anchor="middle" '
               f'font-size="14">{escape(ax.title)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(ax.xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ax.ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save(ax: Axes, path: str | Path, **kw) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render(ax, **kw))
    return path
