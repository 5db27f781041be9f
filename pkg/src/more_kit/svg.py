"""Minimal SVG 1.1 figures: per-metric box summaries and 2-D scatter plots."""
from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _doc(width: int, height: int, body: Sequence[str], title: str = "") -> str:
    head = ('<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n')
    if title:
        head += f"<title>{escape(title)}</title>\n"
    head += f'<rect width="{width}" height="{height}" fill="white"/>\n'
    return head + "\n".join(body) + "\n</svg>\n"


def box_summary(metrics: Mapping[str, np.ndarray], title: str = "QC metrics") -> str:
    """One panel per metric: whiskers at min/max, box at quartiles, median line."""
    panel_w, height, pad = 160, 300, 40
    body = []
    for p, (name, values) in enumerate(metrics.items()):
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        x0 = p * panel_w
        cx = x0 + panel_w / 2
        body.append(f'<text x="{cx:.1f}" y="{height - 10}" font-size="12" '
                    f'text-anchor="middle">{escape(name)}</text>')
        if v.size == 0:
            continue
        lo, q1, med, q3, hi = np.percentile(v, [0, 25, 50, 75, 100])
        span = hi - lo if hi > lo else 1.0

        def y(val):
            return height - pad - (val - lo) / span * (height - 2 * pad)

        body.append(f'<line x1="{cx:.1f}" y1="{y(hi):.1f}" x2="{cx:.1f}" y2="{y(lo):.1f}" stroke="black"/>')
        body.append(f'<rect x="{cx - 25:.1f}" y="{y(q3):.1f}" width="50" '
                    f'height="{max(y(q1) - y(q3), 0.5):.1f}" fill="#9ecae1" stroke="black"/>')
        body.append(f'<line x1="{cx - 25:.1f}" y1="{y(med):.1f}" x2="{cx + 25:.1f}" '
                    f'y2="{y(med):.1f}" stroke="#d62728" stroke-width="2"/>')
        for val in (lo, hi):
            body.append(f'<text x="{cx + 30:.1f}" y="{y(val) + 4:.1f}" font-size="10">{val:.3g}</text>')
    width = max(panel_w * len(metrics), panel_w)
    return _doc(width, height, body, title)


def scatter(xy, groups, names: Sequence[str] = (), title: str = "") -> str:
    """Scatter of the first two columns of ``xy`` colored by integer group."""
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    groups = np.asarray(groups, dtype=np.int64)
    size, pad = 480, 30
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pts = pad + (xy - lo) / span * (size - 2 * pad)
    body = []
    for (px, py), g in zip(pts, groups):
        color = PALETTE[g % len(PALETTE)] if g >= 0 else "#cccccc"
        body.append(f'<circle cx="{px:.1f}" cy="{size - py:.1f}" r="2" fill="{color}" '
                    'fill-opacity="0.7"/>')
    for i, g in enumerate(np.unique(groups[groups >= 0])):
        label = names[g] if g < len(names) else str(g)
        body.append(f'<rect x="{size + 10}" y="{20 + 16 * i}" width="10" height="10" '
                    f'fill="{PALETTE[g % len(PALETTE)]}"/>')
        body.append(f'<text x="{size + 25}" y="{29 + 16 * i}" font-size="11">{escape(label)}</text>')
    return _doc(size + 140, size, body, title)
