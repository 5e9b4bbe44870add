"""Minimal SVG scatter plots for performance-versus-compute studies.

Hand-rolled on purpose: the plots needed here are a log-x scatter with
optional series lines and a highlighted frontier polyline, and emitting
the couple of dozen SVG elements directly keeps the package free of
plotting dependencies.  Output is a plain UTF-8 ``.svg`` string that any
browser renders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError

__all__ = ["Series", "ScatterPlot", "render_scatter"]

# Colorblind-safe cycle (Okabe-Ito, minus black which is used for axes).
PALETTE = (
    "#0072b2",
    "#d55e00",
    "#009e73",
    "#cc79a7",
    "#e69f00",
    "#56b4e9",
    "#f0e442",
)

MARKERS = ("circle", "square", "diamond", "triangle")


@dataclass
class Series:
    """One named group of points.

    x values are compute costs (must be positive when the x axis is
    logarithmic), y values are the metric.  ``labels`` optionally tags
    individual points; tagged points get a small text annotation.
    """

    name: str
    xs: list
    ys: list
    labels: list = field(default_factory=list)
    connect: bool = False

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ConfigError(
                f"series {self.name!r}: {len(self.xs)} x values vs "
                f"{len(self.ys)} y values"
            )
        if self.labels and len(self.labels) != len(self.xs):
            raise ConfigError(
                f"series {self.name!r}: {len(self.labels)} labels for "
                f"{len(self.xs)} points"
            )


def _esc(text):
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _fmt(v):
    # Short stable float formatting for coordinates.
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _nice_ticks(lo, hi, target=5):
    """Round tick positions covering [lo, hi] on a linear scale."""
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mag * mult
        if step >= raw:
            break
    first = math.floor(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 0.5 * step:
        if t >= lo - 0.5 * step:
            ticks.append(round(t, 12))
        t += step
    return ticks


def _log_ticks(lo, hi):
    """Decade ticks (1eN) covering [lo, hi] in log10 space."""
    ticks = []
    for p in range(math.floor(lo), math.ceil(hi) + 1):
        ticks.append(float(p))
    return ticks


def _tick_label(v, logx):
    if logx:
        p = int(round(v))
        if -3 <= p <= 4:
            return _fmt(10.0 ** p)
        return f"1e{p}"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return f"{v:g}"


def _marker(kind, x, y, color, r=4.0):
    if kind == "circle":
        return (
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" '
            f'fill="{color}" />'
        )
    if kind == "square":
        s = r * 1.7
        return (
            f'<rect x="{_fmt(x - s / 2)}" y="{_fmt(y - s / 2)}" '
            f'width="{_fmt(s)}" height="{_fmt(s)}" fill="{color}" />'
        )
    if kind == "diamond":
        pts = f"{_fmt(x)},{_fmt(y - r * 1.3)} {_fmt(x + r * 1.3)},{_fmt(y)} " \
              f"{_fmt(x)},{_fmt(y + r * 1.3)} {_fmt(x - r * 1.3)},{_fmt(y)}"
        return f'<polygon points="{pts}" fill="{color}" />'
    # triangle
    pts = f"{_fmt(x)},{_fmt(y - r * 1.3)} {_fmt(x + r * 1.2)},{_fmt(y + r)} " \
          f"{_fmt(x - r * 1.2)},{_fmt(y + r)}"
    return f'<polygon points="{pts}" fill="{color}" />'


@dataclass
class ScatterPlot:
    """Scatter chart description; call :meth:`render` for the SVG text."""

    title: str = ""
    x_label: str = "GFLOPs"
    y_label: str = "NLL"
    width: int = 640
    height: int = 440
    logx: bool = True
    series: list = field(default_factory=list)
    frontier: list = field(default_factory=list)

    def add(self, series):
        self.series.append(series)
        return self

    def render(self):
        pts = [(x, y) for s in self.series for x, y in zip(s.xs, s.ys)]
        pts.extend(self.frontier)
        if not pts:
            raise ConfigError("cannot render a plot with no points")
        if self.logx:
            for x, _ in pts:
                if x <= 0:
                    raise ConfigError(
                        f"log-scale x axis requires positive costs, got {x}"
                    )
            xs = [math.log10(x) for x, _ in pts]
        else:
            xs = [x for x, _ in pts]
        ys = [y for _, y in pts]

        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        if x_hi - x_lo < 1e-9:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        if y_hi - y_lo < 1e-9:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        # 6% padding so markers do not clip at the box edge
        xpad = 0.06 * (x_hi - x_lo)
        ypad = 0.06 * (y_hi - y_lo)
        x_lo, x_hi = x_lo - xpad, x_hi + xpad
        y_lo, y_hi = y_lo - ypad, y_hi + ypad

        m_left, m_right, m_top, m_bot = 64, 16, 36, 48
        pw = self.width - m_left - m_right
        ph = self.height - m_top - m_bot

        def px(x):
            v = math.log10(x) if self.logx else x
            return m_left + (v - x_lo) / (x_hi - x_lo) * pw

        def py(y):
            return m_top + (y_hi - y) / (y_hi - y_lo) * ph

        out = []
        out.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" '
            f'font-family="sans-serif" font-size="12">'
        )
        out.append(
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" '
            f'fill="white" />'
        )
        if self.title:
            out.append(
                f'<text x="{self.width // 2}" y="20" text-anchor="middle" '
                f'font-size="14" font-weight="bold">{_esc(self.title)}</text>'
            )

        # plot box
        out.append(
            f'<rect x="{m_left}" y="{m_top}" width="{pw}" height="{ph}" '
            f'fill="none" stroke="#333" />'
        )

        xticks = _log_ticks(x_lo, x_hi) if self.logx else _nice_ticks(x_lo, x_hi)
        for t in xticks:
            if t < x_lo or t > x_hi:
                continue
            tx = m_left + (t - x_lo) / (x_hi - x_lo) * pw
            out.append(
                f'<line x1="{_fmt(tx)}" y1="{m_top}" x2="{_fmt(tx)}" '
                f'y2="{m_top + ph}" stroke="#ddd" />'
            )
            out.append(
                f'<text x="{_fmt(tx)}" y="{m_top + ph + 16}" '
                f'text-anchor="middle">{_esc(_tick_label(t, self.logx))}</text>'
            )
        for t in _nice_ticks(y_lo, y_hi):
            if t < y_lo or t > y_hi:
                continue
            ty = m_top + (y_hi - t) / (y_hi - y_lo) * ph
            out.append(
                f'<line x1="{m_left}" y1="{_fmt(ty)}" x2="{m_left + pw}" '
                f'y2="{_fmt(ty)}" stroke="#ddd" />'
            )
            out.append(
                f'<text x="{m_left - 6}" y="{_fmt(ty + 4)}" '
                f'text-anchor="end">{_esc(_tick_label(t, False))}</text>'
            )

        out.append(
            f'<text x="{m_left + pw // 2}" y="{self.height - 10}" '
            f'text-anchor="middle">{_esc(self.x_label)}</text>'
        )
        out.append(
            f'<text x="16" y="{m_top + ph // 2}" text-anchor="middle" '
            f'transform="rotate(-90 16 {m_top + ph // 2})">'
            f"{_esc(self.y_label)}</text>"
        )

        # frontier under the data markers
        if self.frontier:
            fr = sorted(self.frontier)
            path = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in fr)
            out.append(
                f'<polyline points="{path}" fill="none" stroke="#999" '
                f'stroke-width="2" stroke-dasharray="6 4" />'
            )

        for i, s in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            marker = MARKERS[i % len(MARKERS)]
            if s.connect and len(s.xs) > 1:
                order = sorted(range(len(s.xs)), key=lambda j: s.xs[j])
                path = " ".join(
                    f"{_fmt(px(s.xs[j]))},{_fmt(py(s.ys[j]))}" for j in order
                )
                out.append(
                    f'<polyline points="{path}" fill="none" '
                    f'stroke="{color}" stroke-width="1.5" />'
                )
            for j, (x, y) in enumerate(zip(s.xs, s.ys)):
                out.append(_marker(marker, px(x), py(y), color))
                if s.labels and s.labels[j]:
                    out.append(
                        f'<text x="{_fmt(px(x) + 6)}" y="{_fmt(py(y) - 6)}" '
                        f'font-size="10" fill="#555">'
                        f"{_esc(s.labels[j])}</text>"
                    )

        # legend, top-right inside the box
        ly = m_top + 14
        for i, s in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            marker = MARKERS[i % len(MARKERS)]
            lx = m_left + pw - 130
            out.append(_marker(marker, lx, ly - 4, color, r=4.0))
            out.append(
                f'<text x="{_fmt(lx + 10)}" y="{_fmt(ly)}">{_esc(s.name)}</text>'
            )
            ly += 16

        out.append("</svg>")
        return "\n".join(out) + "\n"


def render_scatter(series, frontier=None, **kw):
    """Convenience wrapper: build a :class:`ScatterPlot` and render it."""
    plot = ScatterPlot(**kw)
    for s in series:
        plot.add(s)
    if frontier:
        plot.frontier = list(frontier)
    return plot.render()
