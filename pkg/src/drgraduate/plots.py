"""Minimal standalone SVG line charts and heatmaps."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 320, 50
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _svg(body: list, width=W, height=H) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "\n".join(body) + "\n</svg>\n")


def line_chart(x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "", logx: bool = False,
               ylim=None) -> str:
    """``series`` maps a label to y values; ``None`` entries break the line."""
    x = np.asarray(x, dtype=np.float64)
    tx = np.log10(x) if logx else x
    ys = [v for vals in series.values() for v in vals if v is not None and math.isfinite(v)]
    lo, hi = ylim if ylim else ((min(ys), max(ys)) if ys else (0.0, 1.0))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = float(tx.min()), float(tx.max())
    if x1 == x0:
        x1 = x0 + 1

    def px(v):
        return PAD + (v - x0) / (x1 - x0) * (W - 2 * PAD)

    def py(v):
        return H - PAD - (v - lo) / (hi - lo) * (H - 2 * PAD)

    body = [f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#444"/>',
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>',
            f'<text x="{PAD - 4}" y="{py(lo)}" text-anchor="end">{lo:.3g}</text>',
            f'<text x="{PAD - 4}" y="{py(hi) + 8}" text-anchor="end">{hi:.3g}</text>',
            f'<text x="{PAD}" y="{H - PAD + 14}" text-anchor="middle">{x.min():.3g}</text>',
            f'<text x="{W - PAD}" y="{H - PAD + 14}" text-anchor="middle">{x.max():.3g}</text>']
    for k, (label, vals) in enumerate(series.items()):
        colour = PALETTE[k % len(PALETTE)]
        runs, cur = [], []
        for xv, yv in zip(tx, vals):
            if yv is None or not math.isfinite(yv):
                if cur:
                    runs.append(cur)
                cur = []
            else:
                cur.append(f"{px(xv):.1f},{py(yv):.1f}")
        if cur:
            runs.append(cur)
        for run in runs:
            body.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{" ".join(run)}"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 12 * (k + 1)}" fill="{colour}" font-size="9">'
                    f'{escape(str(label))}</text>')
    return _svg(body, W + 40)


def heatmap(matrix, title: str = "", row_label: str = "predicted", col_label: str = "true",
            fmt: str = "{:.1f}") -> str:
    """Grid with one cell per entry; NaN cells are drawn grey and left blank."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    cell = 44
    finite = m[np.isfinite(m)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    body = [f'<text x="{PAD + cols * cell / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<text x="{PAD + cols * cell / 2}" y="{PAD + rows * cell + 30}" text-anchor="middle">{escape(col_label)}</text>',
            f'<text x="14" y="{PAD + rows * cell / 2}" transform="rotate(-90 14 {PAD + rows * cell / 2})" '
            f'text-anchor="middle">{escape(row_label)}</text>']
    for i in range(rows):
        body.append(f'<text x="{PAD - 6}" y="{PAD + i * cell + cell / 2 + 4}" text-anchor="end">{i}</text>')
        for j in range(cols):
            v = m[i, j]
            x, y = PAD + j * cell, PAD + i * cell
            if math.isfinite(v):
                shade = int(255 - 200 * (v - lo) / span)
                fill = f"rgb({shade},{shade},255)"
                text = fmt.format(v)
            else:
                fill, text = "#ccc", ""
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#fff"/>')
            body.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle">{text}</text>')
    for j in range(cols):
        body.append(f'<text x="{PAD + j * cell + cell / 2}" y="{PAD + rows * cell + 14}" text-anchor="middle">{j}</text>')
    return _svg(body, PAD * 2 + cols * cell, PAD * 2 + rows * cell + 20)


def save(path: str, svg: str, comment: str | None = None) -> None:
    if comment:
        # after the opening tag, so the file still starts with <svg
        head, rest = svg.split(">", 1)
        svg = f"{head}><!-- {comment} -->{rest}"
    with open(path, "w") as fh:
        fh.write(svg)
