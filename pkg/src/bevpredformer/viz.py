"""Image output for instance maps: 16-bit PGM and colored PNG."""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

BACKGROUND = (0, 0, 0)


def write_pgm(path: Union[str, Path], labels: np.ndarray) -> None:
    """Binary PGM (P5) with maxval 65535; samples big-endian as the format requires."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise ValueError("labels must fit in 16 bits")
    h, w = labels.shape
    head = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(head + labels.astype(">u2").tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    body = data[pos + 1:]
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def instance_color(label: int) -> tuple:
    """Stable, well-spread color per id (golden-ratio hue walk)."""
    if label == 0:
        return BACKGROUND
    hue = (label * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def colorize(labels: np.ndarray, scale: int = 1) -> np.ndarray:
    labels = np.asarray(labels)
    ids = np.unique(labels)
    lut = {int(i): instance_color(int(i)) for i in ids}
    rgb = np.zeros(labels.shape + (3,), np.uint8)
    for i, c in lut.items():
        rgb[labels == i] = c
    # row 0 is the most negative y; flip so the ego's left side is drawn on top
    rgb = rgb[::-1]
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    return rgb


def write_png(path: Union[str, Path], labels: np.ndarray, scale: int = 8) -> None:
    Image.fromarray(colorize(labels, scale)).save(path)
