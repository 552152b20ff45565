"""SVG renderers: colour-coded region/word explanations and training curves."""
from __future__ import annotations

import base64
import csv
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .dataset import _to_png_bytes, load_png, normalize
from .interpretability import select_pairs
from .rwa import RelevanceMatrix

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324")
NEUTRAL = "#444444"


@dataclass
class ExplanationRender:
    svg: str
    legend: list[dict]


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def render_explanation(image, caption: str, matrix, boxes, c: float = 2.0, scale: int = 4) -> ExplanationRender:
    """Draw one box per selected region-word pair and colour the matching caption words.

    ``image`` is a PNG path or a (3, H, W) array in [0, 1]; ``matrix`` holds
    P(word | region) with one row per box and one column per caption word.
    A word picked by several regions takes the colour of its strongest pair.
    """
    probs = matrix.probs if isinstance(matrix, RelevanceMatrix) else np.asarray(matrix, dtype=np.float64)
    words = normalize(caption)
    if probs.ndim != 2 or probs.shape != (len(boxes), len(words)):
        raise ValueError(
            f"relevance matrix {probs.shape} does not match {len(boxes)} boxes x {len(words)} caption words"
        )
    img = load_png(image) if isinstance(image, (str, Path)) else np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    sel = select_pairs(probs, c)
    pairs = sorted(sel.pairs, key=lambda p: (p[0], p[1]))
    word_colour: dict[int, tuple[float, str]] = {}
    legend = []
    for i, j, p in pairs:
        colour = PALETTE[i % len(PALETTE)]
        legend.append({"region": i, "word": words[j], "word_index": j, "probability": round(p, 6), "color": colour})
        if j not in word_colour or p > word_colour[j][0]:
            word_colour[j] = (p, colour)

    width, img_h = w * scale, h * scale
    caption_y = img_h + 28
    legend_y0 = caption_y + 24
    height = legend_y0 + 18 * len(legend) + 8
    png = base64.b64encode(_to_png_bytes(img)).decode("ascii")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<image x="0" y="0" width="{width}" height="{img_h}" style="image-rendering:pixelated" '
        f'xlink:href="data:image/png;base64,{png}"/>',
    ]
    for n, (i, j, p) in enumerate(pairs):
        bx, by, bw, bh = boxes[i]
        inset = 2 * (n - [q[0] for q in pairs].index(i))  # nested outline when a region has several words
        out.append(
            f'<rect class="pair-box" data-region="{i}" data-word="{j}" x="{bx * scale + inset}" '
            f'y="{by * scale + inset}" width="{max(bw * scale - 2 * inset, 1)}" height="{max(bh * scale - 2 * inset, 1)}" '
            f'fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="3"/>'
        )
    spans = []
    for j, word in enumerate(words):
        if j in word_colour:
            spans.append(f'<tspan class="pair-word" fill="{word_colour[j][1]}" font-weight="bold">{escape(word)}</tspan>')
        else:
            spans.append(f'<tspan fill="{NEUTRAL}">{escape(word)}</tspan>')
    out.append(f'<text x="4" y="{caption_y}" font-family="sans-serif" font-size="18">{" ".join(spans)}</text>')
    for n, item in enumerate(legend):
        y = legend_y0 + 18 * n
        label = f"r{item['region'] + 1} - {item['word']} ({_fmt(item['probability'])})"
        out.append(
            f'<text class="legend" x="4" y="{y}" font-family="sans-serif" font-size="13" '
            f'fill={quoteattr(item["color"])}>{escape(label)}</text>'
        )
    out.append("</svg>")
    return ExplanationRender("\n".join(out) + "\n", legend)


def read_curve_csv(path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: missing header row")
    header, data = rows[0], [r for r in rows[1:] if r]
    if not data:
        raise ValueError(f"{path}: no data rows")
    return header, [[float(v) for v in r] for r in data]


def render_curves(csv_path, columns=None, width: int = 480, height: int = 320) -> str:
    """Line chart of the requested CSV columns against the first column."""
    header, data = read_curve_csv(csv_path)
    columns = list(columns) if columns else header[1:]
    for col in columns:
        if col not in header:
            raise ValueError(f"unknown column {col!r}; available: {header}")
    arr = np.asarray(data)
    xs = arr[:, 0]
    ys = arr[:, [header.index(c) for c in columns]]
    left, right, top, bottom = 60, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text class="x-label" x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{escape(header[0])}</text>',
        f'<text class="y-label" x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13" transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(", ".join(columns))}</text>',
        f'<text x="{left - 4}" y="{top + 4}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{left - 4}" y="{top + ph}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{left}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{x0:.3g}</text>',
        f'<text x="{left + pw}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{x1:.3g}</text>',
    ]
    for n, col in enumerate(columns):
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys[:, n]))
        colour = PALETTE[n % len(PALETTE)]
        out.append(f'<polyline class="series" data-column={quoteattr(col)} points="{pts}" fill="none" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 * (n + 1)}" text-anchor="end" font-size="11" '
                   f'fill="{colour}">{escape(col)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
