"""Minimal deterministic SVG charts.

Line, grouped-bar and scatter charts sufficient for the audit and theory
figures.  No plotting dependency: output is a plain SVG string with fixed
canvas geometry and explicitly formatted coordinates, so identical inputs
yield identical bytes.
"""

from __future__ import annotations

import math

W, H = 640, 420
ML, MR, MT, MB = 64, 16, 34, 46
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def _f(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12 * step:
        out.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return out


class Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 xlim: tuple[float, float], ylim: tuple[float, float],
                 logx: bool = False, logy: bool = False):
        self.logx, self.logy = logx, logy
        self.x0, self.x1 = (math.log10(xlim[0]), math.log10(xlim[1])) if logx else xlim
        self.y0, self.y1 = (math.log10(ylim[0]), math.log10(ylim[1])) if logy else ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="monospace" font-size="12">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
            f'<text x="{W // 2}" y="{H - 8}" text-anchor="middle">{_esc(xlabel)}</text>',
            f'<text x="14" y="{H // 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {H // 2})">{_esc(ylabel)}</text>',
            f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" '
            f'fill="none" stroke="#333"/>',
        ]
        self._axes()

    def px(self, x: float) -> float:
        if self.logx:
            x = math.log10(max(x, 1e-300))
        return ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, y: float) -> float:
        if self.logy:
            y = math.log10(max(y, 1e-300))
        return H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)

    def _axes(self):
        def label(v, log):
            return f"{10 ** v:.3g}" if log else f"{v:.4g}"
        for t in _ticks(self.x0, self.x1):
            x = ML + (t - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
            self.parts.append(f'<line x1="{_f(x)}" y1="{H - MB}" x2="{_f(x)}" '
                              f'y2="{H - MB + 4}" stroke="#333"/>')
            self.parts.append(f'<text x="{_f(x)}" y="{H - MB + 17}" '
                              f'text-anchor="middle">{label(t, self.logx)}</text>')
        for t in _ticks(self.y0, self.y1):
            y = H - MB - (t - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
            self.parts.append(f'<line x1="{ML - 4}" y1="{_f(y)}" x2="{ML}" '
                              f'y2="{_f(y)}" stroke="#333"/>')
            self.parts.append(f'<text x="{ML - 7}" y="{_f(y + 4)}" '
                              f'text-anchor="end">{label(t, self.logy)}</text>')

    def polyline(self, xs, ys, color: str):
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                          f'stroke-width="1.5"/>')

    def dots(self, xs, ys, color: str, r: float = 3.0):
        for x, y in zip(xs, ys):
            self.parts.append(f'<circle cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" '
                              f'r="{r}" fill="{color}"/>')

    def bar(self, x: float, width: float, y: float, color: str):
        top = min(self.py(y), self.py(0.0))
        height = abs(self.py(y) - self.py(0.0))
        self.parts.append(f'<rect x="{_f(x)}" y="{_f(top)}" width="{_f(width)}" '
                          f'height="{_f(height)}" fill="{color}"/>')

    def legend(self, labels: list[str]):
        for i, name in enumerate(labels):
            y = MT + 14 + 16 * i
            color = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{W - MR - 130}" y="{y - 9}" width="10" '
                              f'height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{W - MR - 115}" y="{y}">{_esc(name)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts) + "\n</svg>\n"


def _lims(values, pad: float = 0.06, log: bool = False):
    vals = [v for v in values if math.isfinite(v) and (not log or v > 0)]
    if not vals:
        return (0.0, 1.0)
    lo, hi = min(vals), max(vals)
    if log:
        return (lo / 1.5, hi * 1.5)
    span = (hi - lo) or abs(hi) or 1.0
    return (lo - pad * span, hi + pad * span)


def line_plot(series: list[tuple[str, list, list]], title: str, xlabel: str,
              ylabel: str, logx: bool = False, logy: bool = False) -> str:
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    cv = Canvas(title, xlabel, ylabel, _lims(xs_all, log=logx),
                _lims(ys_all, log=logy), logx=logx, logy=logy)
    for i, (_, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        cv.polyline(xs, ys, color)
        cv.dots(xs, ys, color, r=2.5)
    cv.legend([name for name, _, _ in series])
    return cv.render()


def scatter_plot(series: list[tuple[str, list, list]], title: str, xlabel: str,
                 ylabel: str) -> str:
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    cv = Canvas(title, xlabel, ylabel, _lims(xs_all), _lims(ys_all))
    for i, (_, xs, ys) in enumerate(series):
        cv.dots(xs, ys, PALETTE[i % len(PALETTE)])
    cv.legend([name for name, _, _ in series])
    return cv.render()


def grouped_bars(categories: list[str], series: list[tuple[str, list]],
                 title: str, ylabel: str) -> str:
    ys_all = [v for _, vals in series for v in vals]
    cv = Canvas(title, "", ylabel, (0.0, float(len(categories))),
                _lims(ys_all + [0.0]))
    slot = (W - ML - MR) / max(len(categories), 1)
    bar_w = slot * 0.8 / max(len(series), 1)
    for ci, cat in enumerate(categories):
        for si, (_, vals) in enumerate(series):
            x = ML + ci * slot + slot * 0.1 + si * bar_w
            cv.bar(x, bar_w - 1.0, vals[ci], PALETTE[si % len(PALETTE)])
        cv.parts.append(f'<text x="{_f(ML + (ci + 0.5) * slot)}" y="{H - MB + 17}" '
                        f'text-anchor="middle">{_esc(cat)}</text>')
    cv.legend([name for name, _ in series])
    return cv.render()
