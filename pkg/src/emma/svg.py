"""Standalone SVG 1.1 bar charts and histograms with a fixed 800x500 viewport."""

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")


def _header(title):
    return [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" "http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">',
        f'<svg version="1.1" xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{escape(title)}</text>',
    ]


def _axes(xlabel, ylabel, ymax):
    x0, y0 = LEFT, HEIGHT - BOTTOM
    out = [
        f'<line x1="{x0}" y1="{y0}" x2="{WIDTH - RIGHT}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>',
        f'<text x="{(x0 + WIDTH - RIGHT) / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(xlabel)}</text>',
        f'<text x="18" y="{(TOP + y0) / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {(TOP + y0) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        y = y0 - frac * (y0 - TOP)
        out.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{frac * ymax:.3g}</text>')
    return out


def _legend(names):
    out = []
    for i, name in enumerate(names):
        y = TOP + 4 + 18 * i
        out.append(f'<rect x="{WIDTH - RIGHT - 150}" y="{y}" width="12" height="12" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{WIDTH - RIGHT - 132}" y="{y + 11}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    return out


def bar_chart(values, groups, group_names, title, xlabel, ylabel):
    """One bar per value, coloured by integer group, heights proportional to value."""
    values = np.asarray(values, dtype=np.float64)
    ymax = float(values.max()) if values.size and values.max() > 0 else 1.0
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    slot = plot_w / max(len(values), 1)
    lines = _header(title) + _axes(xlabel, ylabel, ymax)
    for i, (v, g) in enumerate(zip(values, groups)):
        h = plot_h * max(v, 0.0) / ymax
        x = LEFT + i * slot + 0.1 * slot
        lines.append(
            f'<rect x="{x:.2f}" y="{HEIGHT - BOTTOM - h:.2f}" width="{0.8 * slot:.2f}" height="{h:.2f}" fill="{PALETTE[g % len(PALETTE)]}"/>'
        )
    lines += _legend(group_names)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def histogram(series, title, xlabel, ylabel="count", bins=20):
    """Overlaid histograms of named series on shared bins."""
    names = list(series)
    arrays = [np.asarray(series[k], dtype=np.float64) for k in names]
    pooled = np.concatenate(arrays) if arrays else np.zeros(1)
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = [np.histogram(a, bins=edges)[0] for a in arrays]
    ymax = float(max((c.max() for c in counts), default=1)) or 1.0
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    bw = plot_w / bins
    lines = _header(title) + _axes(xlabel, ylabel, ymax)
    for s, c in enumerate(counts):
        for b, count in enumerate(c):
            h = plot_h * count / ymax
            lines.append(
                f'<rect x="{LEFT + b * bw:.2f}" y="{HEIGHT - BOTTOM - h:.2f}" width="{bw:.2f}" height="{h:.2f}" '
                f'fill="{PALETTE[s % len(PALETTE)]}" fill-opacity="0.5"/>'
            )
    for frac in (0.0, 0.5, 1.0):
        x = LEFT + frac * plot_w
        lines.append(f'<text x="{x:.1f}" y="{HEIGHT - BOTTOM + 16}" text-anchor="middle" font-family="sans-serif" font-size="11">{lo + frac * (hi - lo):.3g}</text>')
    lines += _legend(names)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
