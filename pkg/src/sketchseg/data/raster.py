"""Deterministic sketch rasterisation: black polylines on a white canvas."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .types import DatasetError, VectorSketch


def rasterize(
    sketch: VectorSketch,
    out_size: tuple[int, int],
    stroke_width: int = 2,
) -> np.ndarray:
    """Render ``sketch`` to an ``out_size`` (H, W) RGB float image in [0, 1].

    Canvas coordinates are scaled uniformly (aspect preserved) and centered,
    inset by the stroke width so ink stays inside the frame. No anti-aliasing;
    identical inputs produce bit-identical output.
    """
    out_h, out_w = out_size
    if out_h < 16 or out_w < 16:
        raise DatasetError(f"output size {out_size} below 16x16 minimum")
    if stroke_width < 1:
        raise DatasetError("stroke_width must be >= 1")
    if not sketch.strokes or all(len(s) < 2 for s in sketch.strokes):
        raise DatasetError("cannot rasterize a sketch with no drawable strokes")

    can_h, can_w = sketch.canvas_size
    margin = stroke_width // 2 + 1
    scale = min((out_w - 2 * margin) / can_w, (out_h - 2 * margin) / can_h)
    off_x = (out_w - can_w * scale) / 2.0
    off_y = (out_h - can_h * scale) / 2.0

    img = Image.new("L", (out_w, out_h), color=255)
    draw = ImageDraw.Draw(img)
    for stroke in sketch.strokes:
        if len(stroke) < 2:
            continue
        pts = [(x * scale + off_x, y * scale + off_y) for x, y in stroke]
        draw.line(pts, fill=0, width=stroke_width, joint="curve")

    gray = np.asarray(img, dtype=np.float32) / 255.0
    return np.repeat(gray[:, :, None], 3, axis=2)
