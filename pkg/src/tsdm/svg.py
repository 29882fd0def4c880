"""Minimal standalone SVG line and box plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 640, 320, 40
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _frame(title: str, body: list) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">'
        f'<rect width="{W}" height="{H}" fill="white"/>'
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>'
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#888"/>'
    )
    return head + "".join(body) + "</svg>\n"


def _scaler(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) * (b - a) / span


def line_plot(series: list, title: str = "", labels=None) -> str:
    series = [np.asarray(s, dtype=float) for s in series]
    n = max(len(s) for s in series)
    lo = min(float(s.min()) for s in series)
    hi = max(float(s.max()) for s in series)
    sx = _scaler(0, max(n - 1, 1), PAD, W - PAD)
    sy = _scaler(lo, hi, H - PAD, PAD)
    body = []
    for i, s in enumerate(series):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(sx(np.arange(len(s))), sy(s)))
        color = COLORS[i % len(COLORS)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        if labels:
            body.append(
                f'<text x="{W - PAD - 4}" y="{PAD + 14 * (i + 1)}" text-anchor="end" font-family="sans-serif" '
                f'font-size="11" fill="{color}">{escape(str(labels[i]))}</text>'
            )
    return _frame(title, body)


def box_plot(summary, title: str = "") -> str:
    """One whisker box per bin from a :class:`~tsdm.spectral.SpectrumSummary`."""
    n = len(summary)
    lo, hi = float(np.min(summary.minimum)), float(np.max(summary.maximum))
    sy = _scaler(lo, hi, H - PAD, PAD)
    step = (W - 2 * PAD) / max(n, 1)
    body = []
    for k in range(n):
        x = PAD + (k + 0.5) * step
        half = max(step * 0.35, 0.5)
        y0, y1, y2, y3, y4 = (float(sy(a[k])) for a in (summary.minimum, summary.q1, summary.median, summary.q3, summary.maximum))
        body.append(f'<line x1="{x:.2f}" y1="{y0:.2f}" x2="{x:.2f}" y2="{y4:.2f}" stroke="#555"/>')
        body.append(
            f'<rect x="{x - half:.2f}" y="{y3:.2f}" width="{2 * half:.2f}" height="{max(y1 - y3, 0.5):.2f}" '
            f'fill="#9ecae1" stroke="#1f77b4"/>'
        )
        body.append(f'<line x1="{x - half:.2f}" y1="{y2:.2f}" x2="{x + half:.2f}" y2="{y2:.2f}" stroke="#d62728"/>')
    return _frame(title, body)
