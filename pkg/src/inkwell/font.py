"""Built-in 5x7 bitmap font and text-secret rendering.

Secrets are white-background images with black glyphs, nearest-neighbor
upscaled by an integer factor and centered, so they stay high-contrast
and blocky at any size.
"""
from __future__ import annotations

import numpy as np

_GLYPHS = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    " ": (".....", ".....", ".....", ".....", ".....", ".....", "....."),
    "-": (".....", ".....", ".....", "#####", ".....", ".....", "....."),
    ".": (".....", ".....", ".....", ".....", ".....", ".##..", ".##.."),
    "!": ("..#..", "..#..", "..#..", "..#..", "..#..", ".....", "..#.."),
    "?": (".###.", "#...#", "....#", "...#.", "..#..", ".....", "..#.."),
}

GLYPH_W, GLYPH_H = 5, 7


def glyph_bitmap(ch):
    rows = _GLYPHS.get(ch.upper())
    if rows is None:
        raise ValueError(f"no glyph for character {ch!r}")
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


def text_bitmap(text):
    """Boolean ink mask for `text`; newlines stack lines with a 1 px gap."""
    lines = text.split("\n")
    if not any(lines):
        raise ValueError("empty text")
    rendered = []
    for line in lines:
        if line == "":
            raise ValueError("empty text line")
        cells = [glyph_bitmap(c) for c in line]
        gap = np.zeros((GLYPH_H, 1), dtype=bool)
        parts = []
        for i, cell in enumerate(cells):
            if i:
                parts.append(gap)
            parts.append(cell)
        rendered.append(np.concatenate(parts, axis=1))
    width = max(r.shape[1] for r in rendered)
    stacked = []
    for i, r in enumerate(rendered):
        if i:
            stacked.append(np.zeros((1, width), dtype=bool))
        extra = width - r.shape[1]
        left = extra // 2
        stacked.append(np.pad(r, ((0, 0), (left, extra - left))))
    return np.concatenate(stacked, axis=0)


def render_text(text, shape):
    """Render `text` into an image of `shape` ((H,W) or (C,H,W)): black
    0.0 glyphs on a white 1.0 background, integer upscaled and centered."""
    if len(shape) == 2:
        c, (h, w) = 1, shape
    elif len(shape) == 3:
        c, h, w = shape
    else:
        raise ValueError(f"bad secret shape {shape}")
    mask = text_bitmap(text)
    th, tw = mask.shape
    scale = min(h // th, w // tw)
    if scale < 1:
        raise ValueError(f"text {text!r} needs {th}x{tw} pixels, image is {h}x{w}")
    mask = np.kron(mask, np.ones((scale, scale), dtype=bool))
    th, tw = mask.shape
    img = np.ones((h, w), dtype=np.float32)
    top, left = (h - th) // 2, (w - tw) // 2
    img[top : top + th, left : left + tw] = np.where(mask, 0.0, 1.0)
    out = np.repeat(img[None], c, axis=0) if len(shape) == 3 else img[None]
    return out.astype(np.float32)
