"""Tiny static SVG line-chart writer for ROC and sweep curves.

Output is a plain polyline chart with axes and a legend; fully
deterministic (no timestamps, no randomness) so rerenders are
byte-identical.
"""

from __future__ import annotations

import math

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]

W, H = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 150, 40, 48


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12:
        ticks.append(round(t, 10))
        t += step
    return ticks


def write_line_chart(path, series, title: str, xlabel: str, ylabel: str):
    """series: list of (name, xs, ys) with equal-length float sequences."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (W - MARGIN_L - MARGIN_R)

    def sy(y):
        return H - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (H - MARGIN_T - MARGIN_B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{MARGIN_L}" y1="{H - MARGIN_B}" x2="{W - MARGIN_R}" y2="{H - MARGIN_B}" stroke="black"/>',
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{H - MARGIN_B}" stroke="black"/>',
        f'<text x="{(MARGIN_L + W - MARGIN_R) / 2:.1f}" y="{H - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{(MARGIN_T + H - MARGIN_B) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(MARGIN_T + H - MARGIN_B) / 2:.1f})">{ylabel}</text>',
    ]
    for t in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(t):.1f}" y1="{H - MARGIN_B}" x2="{sx(t):.1f}" '
                     f'y2="{H - MARGIN_B + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(t):.1f}" y="{H - MARGIN_B + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{MARGIN_L - 4}" y1="{sy(t):.1f}" x2="{MARGIN_L}" '
                     f'y2="{sy(t):.1f}" stroke="black"/>')
        parts.append(f'<text x="{MARGIN_L - 8}" y="{sy(t):.1f}" text-anchor="end" '
                     f'dominant-baseline="middle">{t:g}</text>')
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN_T + 16 * i
        parts.append(f'<line x1="{W - MARGIN_R + 8}" y1="{ly}" x2="{W - MARGIN_R + 28}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - MARGIN_R + 32}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
