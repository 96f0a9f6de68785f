"""Line plots rasterised straight to PNG (axes, decade grid, numeric tick labels)."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .pngio import encode_png

PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14), (23, 190, 207)]

# 3x5 bitmap glyphs, rows top to bottom
_GLYPHS = {
    "0": ("111", "101", "101", "101", "111"), "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"), "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"), "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"), "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"), "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"), "-": ("000", "000", "111", "000", "000"),
    "e": ("000", "111", "111", "100", "111"), "+": ("000", "010", "111", "010", "000"),
}


class Canvas:
    def __init__(self, width: int, height: int):
        self.pixels = np.full((height, width, 3), 255, dtype=np.uint8)

    def put(self, xs, ys, color, thick: int = 1) -> None:
        h, w = self.pixels.shape[:2]
        xs = np.rint(np.asarray(xs)).astype(int)
        ys = np.rint(np.asarray(ys)).astype(int)
        for dx in range(thick):
            for dy in range(thick):
                x, y = xs + dx, ys + dy
                ok = (x >= 0) & (x < w) & (y >= 0) & (y < h)
                self.pixels[y[ok], x[ok]] = color

    def line(self, x0, y0, x1, y1, color, thick: int = 1) -> None:
        steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
        t = np.linspace(0.0, 1.0, steps + 1)
        self.put(x0 + t * (x1 - x0), y0 + t * (y1 - y0), color, thick)

    def text(self, x: int, y: int, s: str, color=(0, 0, 0), scale: int = 2) -> None:
        for k, ch in enumerate(s):
            glyph = _GLYPHS.get(ch)
            if glyph is None:
                continue
            for r, row in enumerate(glyph):
                for c, bit in enumerate(row):
                    if bit == "1":
                        self.pixels[y + r * scale:y + (r + 1) * scale,
                                    x + (k * 4 + c) * scale:x + (k * 4 + c + 1) * scale] = color

    def save(self, path) -> None:
        Path(path).write_bytes(encode_png(self.pixels))


def _label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-")
    return f"{v:g}"


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        return [10.0 ** k for k in range(math.ceil(lo), math.floor(hi) + 1)]
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / 4)) if span > 0 else 1.0
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= 6:
            step *= mult
            break
    return list(np.arange(math.ceil(lo / step) * step, hi + 1e-12 * span, step))


def line_plot(path, series, logx: bool = False, logy: bool = False, width: int = 640, height: int = 420) -> None:
    """Plot ``series``: a list of ``(x, y)`` array pairs. Non-finite and non-positive (log axes) points are skipped."""
    cleaned = []
    for x, y in series:
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        cleaned.append((np.log10(x[ok]) if logx else x[ok], np.log10(y[ok]) if logy else y[ok]))
    allx = np.concatenate([c[0] for c in cleaned]) if cleaned else np.zeros(0)
    ally = np.concatenate([c[1] for c in cleaned]) if cleaned else np.zeros(0)
    if allx.size == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    left, right, top, bottom = 70, width - 20, 20, height - 40
    sx = lambda v: left + (v - x0) / (x1 - x0) * (right - left)  # noqa: E731
    sy = lambda v: bottom - (v - y0) / (y1 - y0) * (bottom - top)  # noqa: E731

    cv = Canvas(width, height)
    grid, axis = (225, 225, 225), (0, 0, 0)
    for t in _ticks(x0, x1, logx):
        cv.line(sx(t), top, sx(t), bottom, grid)
        cv.text(int(sx(t)) - 8, bottom + 8, _label(10 ** t if logx else t))
    for t in _ticks(y0, y1, logy):
        cv.line(left, sy(t), right, sy(t), grid)
        s = _label(10 ** t if logy else t)
        cv.text(left - 8 - 8 * len(s), int(sy(t)) - 5, s)
    cv.line(left, bottom, right, bottom, axis)
    cv.line(left, top, left, bottom, axis)
    for k, (x, y) in enumerate(cleaned):
        color = PALETTE[k % len(PALETTE)]
        px, py = sx(x), sy(y)
        for i in range(len(px) - 1):
            cv.line(px[i], py[i], px[i + 1], py[i + 1], color, thick=2)
        if len(px) == 1:
            cv.put(px, py, color, thick=3)
    cv.save(path)
