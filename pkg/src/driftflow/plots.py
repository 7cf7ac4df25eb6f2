"""Plain-text SVG scatter, grid and line plots.

Everything is drawn on a fixed 640x640 canvas with data ranges padded by 5%
on each side. Callers pass arrays read back from already-written CSVs, so a
plot can never influence the numbers it shows.
"""

from __future__ import annotations

import math
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

CANVAS = 640
MARGIN = 0.05
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _bounds(arrays: Sequence[np.ndarray]) -> tuple[float, float, float, float]:
    pts = [a for a in arrays if a.size]
    if not pts:
        return -1.0, 1.0, -1.0, 1.0
    allp = np.concatenate(pts)
    allp = allp[np.all(np.isfinite(allp), axis=1)]
    if not allp.size:
        return -1.0, 1.0, -1.0, 1.0
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, hi = lo - MARGIN * span, hi + MARGIN * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


class _Frame:
    """Maps data coordinates into a pixel box ``(x0, y0, w, h)``."""

    def __init__(self, box, bounds):
        self.x0, self.y0, self.w, self.h = box
        self.xmin, self.xmax, self.ymin, self.ymax = bounds

    def px(self, x: float) -> float:
        return self.x0 + (x - self.xmin) / (self.xmax - self.xmin) * self.w

    def py(self, y: float) -> float:
        return self.y0 + self.h - (y - self.ymin) / (self.ymax - self.ymin) * self.h

    def axes(self, font: int = 11) -> list[str]:
        out = [
            f'<rect x="{_fmt(self.x0)}" y="{_fmt(self.y0)}" width="{_fmt(self.w)}" height="{_fmt(self.h)}" '
            'fill="none" stroke="#444" stroke-width="1"/>'
        ]
        for v, anchor in ((self.xmin, "start"), (self.xmax, "end")):
            out.append(
                f'<text x="{_fmt(self.px(v))}" y="{_fmt(self.y0 + self.h + font + 2)}" font-size="{font}" '
                f'text-anchor="{anchor}">{v:.3g}</text>'
            )
        for v in (self.ymin, self.ymax):
            out.append(
                f'<text x="{_fmt(self.x0 - 3)}" y="{_fmt(self.py(v))}" font-size="{font}" text-anchor="end">{v:.3g}</text>'
            )
        return out


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">',
        f'<rect width="{CANVAS}" height="{CANVAS}" fill="white"/>',
        f'<text x="{CANVAS / 2}" y="18" font-size="14" text-anchor="middle">{escape(title)}</text>',
    ]


def _scatter_body(frame: _Frame, series, radius: float) -> list[str]:
    out = []
    for k, (pts, label) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2) if np.size(pts) else np.zeros((0, 2))
        out.append(f'<g fill="{color}" fill-opacity="0.6"><title>{escape(label)}</title>')
        for x, y in pts:
            if math.isfinite(x) and math.isfinite(y):
                out.append(f'<circle cx="{_fmt(frame.px(x))}" cy="{_fmt(frame.py(y))}" r="{radius}"/>')
        out.append("</g>")
    return out


def _legend(labels: Sequence[str], x: float, y: float) -> list[str]:
    out = []
    for k, label in enumerate(labels):
        color = PALETTE[k % len(PALETTE)]
        yy = y + 14 * k
        out.append(f'<rect x="{_fmt(x)}" y="{_fmt(yy - 8)}" width="9" height="9" fill="{color}"/>')
        out.append(f'<text x="{_fmt(x + 13)}" y="{_fmt(yy)}" font-size="11">{escape(label)}</text>')
    return out


def _as_2d(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[1] == 1:  # 1D data sits on a horizontal line
        a = np.column_stack([a[:, 0], np.zeros(a.shape[0])])
    return a[:, :2]


def scatter_svg(series: Sequence[tuple[np.ndarray, str]], title: str = "") -> str:
    """One panel; ``series`` is a list of ``(points, label)``."""
    series = [(_as_2d(p), lab) for p, lab in series]
    frame = _Frame((50, 30, CANVAS - 80, CANVAS - 80), _bounds([p for p, _ in series]))
    body = _header(title) + frame.axes() + _scatter_body(frame, series, 2.0)
    body += _legend([lab for _, lab in series], frame.x0 + 8, frame.y0 + 14)
    return "\n".join(body + ["</svg>"]) + "\n"


def grid_svg(panels: Sequence[tuple[str, Sequence[tuple[np.ndarray, str]]]], title: str = "", ncols: int | None = None) -> str:
    """Panels sharing one data range, laid out row-major on the canvas.

    An empty point list draws an empty panel (e.g. a diverged run).
    """
    n = len(panels)
    ncols = ncols or math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    all_pts = [_as_2d(p) for _, series in panels for p, _ in series if np.size(p)]
    bounds = _bounds(all_pts)
    cell_w, cell_h = (CANVAS - 20) / ncols, (CANVAS - 30) / nrows
    body = _header(title)
    for k, (name, series) in enumerate(panels):
        r, c = divmod(k, ncols)
        box = (10 + c * cell_w + 6, 30 + r * cell_h + 16, cell_w - 12, cell_h - 24)
        frame = _Frame(box, bounds)
        body.append(f'<text x="{_fmt(box[0] + box[2] / 2)}" y="{_fmt(box[1] - 4)}" font-size="11" text-anchor="middle">{escape(name)}</text>')
        body.append(f'<rect x="{_fmt(box[0])}" y="{_fmt(box[1])}" width="{_fmt(box[2])}" height="{_fmt(box[3])}" fill="none" stroke="#444"/>')
        body += _scatter_body(frame, [(_as_2d(p) if np.size(p) else np.zeros((0, 2)), lab) for p, lab in series], 1.2)
    return "\n".join(body + ["</svg>"]) + "\n"


def line_svg(
    lines: Sequence[tuple[Sequence[float], Sequence[float], str]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logx: bool = False,
    logy: bool = False,
) -> str:
    """Polylines with markers; non-finite (or non-positive on log axes) points are skipped."""

    def tx(v, log):
        return math.log10(v) if log else v

    clean = []
    for xs, ys, label in lines:
        pts = [
            (tx(x, logx), tx(y, logy))
            for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)
        ]
        clean.append((np.array(pts).reshape(-1, 2), label))
    frame = _Frame((70, 30, CANVAS - 100, CANVAS - 90), _bounds([p for p, _ in clean]))
    body = _header(title) + frame.axes()
    body.append(f'<text x="{CANVAS / 2}" y="{CANVAS - 12}" font-size="12" text-anchor="middle">{escape(xlabel + (" (log10)" if logx else ""))}</text>')
    body.append(
        f'<text x="14" y="{CANVAS / 2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {CANVAS / 2})">'
        f"{escape(ylabel + (' (log10)' if logy else ''))}</text>"
    )
    for k, (pts, label) in enumerate(clean):
        color = PALETTE[k % len(PALETTE)]
        if len(pts) > 1:
            path = " ".join(f"{_fmt(frame.px(x))},{_fmt(frame.py(y))}" for x, y in pts)
            body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            body.append(f'<circle cx="{_fmt(frame.px(x))}" cy="{_fmt(frame.py(y))}" r="3" fill="{color}"/>')
    body += _legend([lab for _, lab in clean], frame.x0 + 8, frame.y0 + 14)
    return "\n".join(body + ["</svg>"]) + "\n"


def write_svg(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
