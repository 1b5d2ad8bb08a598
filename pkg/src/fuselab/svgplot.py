"""Minimal deterministic SVG line/scatter plots for result bundles."""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 160, 40, 50

PALETTE = (
    "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4",
    "#8c613c", "#dc7ec0", "#797979", "#d5bb67", "#82c6e2",
)

Series = Tuple[str, Sequence[float], Sequence[float]]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, count: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / count))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= count:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * span:
        ticks.append(round(t, 12))
        t += step
    return ticks


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, logx: bool, logy: bool):
        self.parts: List[str] = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.logx, self.logy = logx, logy

    def _tx(self, v: float) -> float:
        v = math.log10(v) if self.logx else v
        lo, hi = self.xlim
        return MARGIN_L + (v - lo) / (hi - lo) * (WIDTH - MARGIN_L - MARGIN_R)

    def _ty(self, v: float) -> float:
        v = math.log10(v) if self.logy else v
        lo, hi = self.ylim
        return HEIGHT - MARGIN_B - (v - lo) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B)

    def set_limits(self, xs: List[float], ys: List[float]) -> None:
        def span(values, log):
            vals = [math.log10(v) for v in values] if log else list(values)
            lo, hi = min(vals), max(vals)
            pad = 0.05 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.1
            return lo - pad, hi + pad

        self.xlim = span(xs, self.logx)
        self.ylim = span(ys, self.logy)

    def axes(self) -> None:
        x0, y0 = MARGIN_L, HEIGHT - MARGIN_B
        x1, y1 = WIDTH - MARGIN_R, MARGIN_T
        p = self.parts
        p.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
                 'fill="none" stroke="#333" stroke-width="1"/>')
        p.append(f'<text x="{(x0 + x1) / 2:.1f}" y="22" text-anchor="middle" '
                 f'font-size="15" fill="#111">{self.title}</text>')
        p.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
                 f'font-size="12" fill="#333">{self.xlabel}</text>')
        p.append(f'<text x="18" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
                 f'fill="#333" transform="rotate(-90 18 {(y0 + y1) / 2:.1f})">{self.ylabel}</text>')
        for axis, (lo, hi), log in (("x", self.xlim, self.logx), ("y", self.ylim, self.logy)):
            for t in _ticks(lo, hi):
                label = _fmt(10**t if log else t)
                if axis == "x":
                    px = MARGIN_L + (t - lo) / (hi - lo) * (WIDTH - MARGIN_L - MARGIN_R)
                    p.append(f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 4}" stroke="#333"/>')
                    p.append(f'<text x="{px:.1f}" y="{y0 + 17}" text-anchor="middle" '
                             f'font-size="10" fill="#333">{label}</text>')
                else:
                    py = HEIGHT - MARGIN_B - (t - lo) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B)
                    p.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="#333"/>')
                    p.append(f'<text x="{x0 - 7}" y="{py + 3:.1f}" text-anchor="end" '
                             f'font-size="10" fill="#333">{label}</text>')

    def legend(self, labels: List[str]) -> None:
        for i, label in enumerate(labels):
            color = PALETTE[i % len(PALETTE)]
            y = MARGIN_T + 14 + 16 * i
            x = WIDTH - MARGIN_R + 12
            self.parts.append(f'<rect x="{x}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{x + 15}" y="{y + 1}" font-size="11" fill="#111">{label}</text>')

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n<rect width="100%" height="100%" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


def _finite_series(series: Sequence[Series]):
    out = []
    for label, xs, ys in series:
        pairs = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(y)]
        out.append((label, pairs))
    return out


def _plot(series, title, xlabel, ylabel, logx, logy, draw_lines, draw_points) -> str:
    cleaned = _finite_series(series)
    xs = [x for _, pairs in cleaned for x, _ in pairs]
    ys = [y for _, pairs in cleaned for _, y in pairs]
    canvas = _Canvas(title, xlabel, ylabel, logx, logy)
    if not xs:
        canvas.xlim = canvas.ylim = (0.0, 1.0)
        canvas.axes()
        return canvas.render()
    canvas.set_limits(xs, ys)
    canvas.axes()
    for i, (label, pairs) in enumerate(cleaned):
        color = PALETTE[i % len(PALETTE)]
        points = [(canvas._tx(x), canvas._ty(y)) for x, y in pairs]
        if draw_lines and len(points) > 1:
            path = " ".join(f"{px:.2f},{py:.2f}" for px, py in points)
            canvas.parts.append(
                f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.8"/>'
            )
        if draw_points:
            for px, py in points:
                canvas.parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}"/>')
    canvas.legend([label for label, _ in cleaned])
    return canvas.render()


def line_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
              logx: bool = False, logy: bool = False) -> str:
    return _plot(series, title, xlabel, ylabel, logx, logy, True, True)


def scatter_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
                 logx: bool = False, logy: bool = False) -> str:
    return _plot(series, title, xlabel, ylabel, logx, logy, False, True)
