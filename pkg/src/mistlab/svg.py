"""Minimal SVG 1.1 plots: line charts, grouped bars and the toy trajectory scatter."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#7b3fa0", "#2ca02c", "#ff7f0e", "#8c564b", "#17becf")
REGION_COLORS = ("#f3e3c8", "#d5e6f5", "#dff0d8")
WIDTH, HEIGHT = 480, 360
MARGIN = (56, 20, 20, 44)  # left, right, top, bottom


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


class Canvas:
    def __init__(self, x_range, y_range, width=WIDTH, height=HEIGHT, title: str = ""):
        self.x0, self.x1 = map(float, x_range)
        self.y0, self.y1 = map(float, y_range)
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.width, self.height = width, height
        self.items: List[str] = []
        self.title = title

    def px(self, x: float) -> float:
        left, right = MARGIN[0], self.width - MARGIN[1]
        return left + (x - self.x0) / (self.x1 - self.x0) * (right - left)

    def py(self, y: float) -> float:
        top, bottom = MARGIN[2], self.height - MARGIN[3]
        return bottom - (y - self.y0) / (self.y1 - self.y0) * (bottom - top)

    def add(self, element: str):
        self.items.append(element)

    def rect(self, x, y, w, h, fill):
        self.add(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" fill="{fill}"/>')

    def polyline(self, xs, ys, color, width=1.5, dash: Optional[str] = None):
        pts = " ".join(f"{_fmt(self.px(a))},{_fmt(self.py(b))}" for a, b in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>')

    def circle(self, x, y, r, color):
        self.add(f'<circle cx="{_fmt(self.px(x))}" cy="{_fmt(self.py(y))}" r="{r}" fill="{color}"/>')

    def text(self, x, y, s, anchor="middle", size=11):
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" text-anchor="{anchor}">{escape(str(s))}</text>')

    def axes(self, xlabel="", ylabel="", xticks=None, yticks=None):
        left, right = MARGIN[0], self.width - MARGIN[1]
        top, bottom = MARGIN[2], self.height - MARGIN[3]
        self.add(f'<path d="M{left},{top} V{bottom} H{right}" fill="none" stroke="#000"/>')
        xticks = np.linspace(self.x0, self.x1, 5) if xticks is None else xticks
        yticks = np.linspace(self.y0, self.y1, 5) if yticks is None else yticks
        for t in xticks:
            label, pos = (t if isinstance(t, tuple) else (_fmt(t), t))
            x = self.px(pos)
            self.add(f'<path d="M{_fmt(x)},{bottom} v4" stroke="#000"/>')
            self.text(x, bottom + 16, label)
        for t in yticks:
            y = self.py(t)
            self.add(f'<path d="M{left},{_fmt(y)} h-4" stroke="#000"/>')
            self.text(left - 6, y + 4, _fmt(t), anchor="end")
        if xlabel:
            self.text((left + right) / 2, self.height - 6, xlabel)
        if ylabel:
            self.add(
                f'<text x="14" y="{_fmt((top + bottom) / 2)}" font-size="11" text-anchor="middle" '
                f'transform="rotate(-90 14 {_fmt((top + bottom) / 2)})">{escape(ylabel)}</text>'
            )

    def legend(self, entries: Sequence[Tuple[str, str]]):
        x, y = self.width - MARGIN[1] - 110, MARGIN[2] + 6
        for i, (label, color) in enumerate(entries):
            yy = y + 14 * i
            self.add(f'<rect x="{x}" y="{yy}" width="10" height="10" fill="{color}"/>')
            self.text(x + 14, yy + 9, label, anchor="start", size=10)

    def render(self) -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
            '<rect width="100%" height="100%" fill="#fff"/>\n'
        )
        title = ""
        if self.title:
            title = f'<text x="{self.width / 2}" y="14" font-size="12" text-anchor="middle">{escape(self.title)}</text>\n'
        return head + title + "\n".join(self.items) + "\n</svg>\n"


def _padded(lo, hi, frac=0.05):
    span = (hi - lo) or 1.0
    return lo - frac * span, hi + frac * span


def line_plot(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], xlabel="", ylabel="", title="") -> str:
    """One polyline with markers per named series of (x, y)."""
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    c = Canvas(_padded(xs.min(), xs.max()), _padded(ys.min(), ys.max()), title=title)
    c.axes(xlabel, ylabel)
    entries = []
    for i, (name, (sx, sy)) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        c.polyline(sx, sy, color)
        for a, b in zip(sx, sy):
            c.circle(a, b, 2.5, color)
        entries.append((name, color))
    c.legend(entries)
    return c.render()


def bar_plot(labels: Sequence[str], values: Sequence[float], ylabel="", title="") -> str:
    values = np.asarray(values, float)
    top = max(1.0, float(values.max())) if values.size else 1.0
    c = Canvas((0, len(labels)), (0, top), title=title)
    c.axes("", ylabel, xticks=[(l, i + 0.5) for i, l in enumerate(labels)])
    for i, v in enumerate(values):
        x0, x1 = c.px(i + 0.15), c.px(i + 0.85)
        y = c.py(v)
        c.rect(x0, y, x1 - x0, c.py(0) - y, PALETTE[i % len(PALETTE)])
        c.text((x0 + x1) / 2, y - 4, f"{v:.3f}", size=10)
    return c.render()


def trajectory_plot(
    predict,
    bounds: Tuple[float, float, float, float],
    points: np.ndarray,
    labels: np.ndarray,
    paths: Dict[str, List[np.ndarray]],
    triple: Optional[np.ndarray] = None,
    grid: int = 60,
    title: str = "",
) -> str:
    """Decision regions of ``predict`` rasterized on a grid, data points and attack paths."""
    x0, x1, y0, y1 = bounds
    c = Canvas((x0, x1), (y0, y1), width=WIDTH, height=WIDTH, title=title)
    gx = np.linspace(x0, x1, grid + 1)
    gy = np.linspace(y0, y1, grid + 1)
    cx, cy = (gx[:-1] + gx[1:]) / 2, (gy[:-1] + gy[1:]) / 2
    mesh = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)
    regions = np.asarray(predict(mesh)).reshape(grid, grid)
    for j in range(grid):
        for i in range(grid):
            left, right = c.px(gx[i]), c.px(gx[i + 1])
            top, bottom = c.py(gy[j + 1]), c.py(gy[j])
            c.rect(left, top, right - left + 0.3, bottom - top + 0.3, REGION_COLORS[int(regions[j, i]) % 3])
    c.axes("x", "y")
    for p, l in zip(points, labels):
        c.circle(p[0], p[1], 1.6, ("#7f5a1e", "#1f4e79", "#2e6b2e")[int(l) % 3])
    entries = []
    for k, (name, plist) in enumerate(sorted(paths.items())):
        color = PALETTE[(k + 1) % len(PALETTE)]
        for path in plist:
            c.polyline(path[:, 0], path[:, 1], color, width=1.0)
            c.circle(path[-1, 0], path[-1, 1], 2.2, color)
        entries.append((name, color))
    if triple is not None:
        c.circle(triple[0], triple[1], 4, "#000")
    c.legend(entries)
    return c.render()
