"""Minimal SVG line and bar charts, written without any display backend."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
W, H = 720, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 150, 40, 40


def _frame(title: str, desc: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<desc>{escape(desc)}</desc>",
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" font-size="14" text-anchor="middle" font-family="sans-serif">{escape(title)}</text>',
    ]


def _axes(lo: float, hi: float, ylabel: str) -> list[str]:
    x0, x1, y0, y1 = LEFT, W - RIGHT, H - BOTTOM, TOP
    out = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="14" y="{(y0 + y1) / 2:.1f}" font-size="11" font-family="sans-serif" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = y0 - (y0 - y1) * k / 4
        out.append(f'<text x="{x0 - 4}" y="{y + 4:.1f}" font-size="10" text-anchor="end" font-family="sans-serif">{v:.3g}</text>')
    return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for k, name in enumerate(names):
        y = TOP + 16 * k
        col = PALETTE[k % len(PALETTE)]
        out.append(f'<rect x="{W - RIGHT + 12}" y="{y}" width="10" height="10" fill="{col}"/>')
        out.append(f'<text x="{W - RIGHT + 26}" y="{y + 9}" font-size="11" font-family="sans-serif">{escape(name)}</text>')
    return out


def line_chart(series: Mapping[str, Sequence[float]], path: str | Path, title: str, ylabel: str, desc: str = "") -> None:
    values = [v for s in series.values() for v in s]
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(s) for s in series.values())
    parts = _frame(title, desc) + _axes(lo, hi, ylabel)
    sx = (W - RIGHT - LEFT) / max(n - 1, 1)
    sy = (H - BOTTOM - TOP) / (hi - lo)
    for k, (name, s) in enumerate(series.items()):
        pts = " ".join(f"{LEFT + i * sx:.1f},{H - BOTTOM - (v - lo) * sy:.1f}" for i, v in enumerate(s))
        parts.append(f'<polyline fill="none" stroke="{PALETTE[k % len(PALETTE)]}" stroke-width="1.2" points="{pts}"/>')
    parts += _legend(list(series))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def bar_chart(groups: Sequence[str], series: Mapping[str, Sequence[float]], path: str | Path,
              title: str, ylabel: str, desc: str = "") -> None:
    """Grouped bars: one group per entry of ``groups``, one bar per series."""
    hi = max(max(s) for s in series.values())
    hi = hi if hi > 0 else 1.0
    parts = _frame(title, desc) + _axes(0.0, hi, ylabel)
    gw = (W - RIGHT - LEFT) / len(groups)
    bw = gw * 0.8 / len(series)
    for g, label in enumerate(groups):
        gx = LEFT + g * gw + gw * 0.1
        parts.append(f'<text x="{LEFT + (g + 0.5) * gw:.1f}" y="{H - BOTTOM + 16}" font-size="11" '
                     f'text-anchor="middle" font-family="sans-serif">{escape(label)}</text>')
        for k, s in enumerate(series.values()):
            bh = (H - BOTTOM - TOP) * s[g] / hi
            parts.append(f'<rect x="{gx + k * bw:.1f}" y="{H - BOTTOM - bh:.1f}" width="{bw:.1f}" '
                         f'height="{bh:.1f}" fill="{PALETTE[k % len(PALETTE)]}"/>')
    parts += _legend(list(series))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
