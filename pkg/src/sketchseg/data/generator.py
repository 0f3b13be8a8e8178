"""Procedural sketch-photo corpus with exact (evaluation-only) masks.

Classes are shape families; instances are per-sample affine + sinusoidal
deformations of the family outline. The paired sketch traces the placed
instance's outline with hand-jitter noise, so the fill of the sketch outline
is guaranteed (by construction, with regeneration) to overlap the true mask.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .types import DatasetError, PairedDataset, PhotoRecord, VectorSketch

OUTLINE_POINTS = 120
PLACEMENT_MARGIN = 3  # px kept free around a placed shape


@dataclass
class GeneratorConfig:
    num_classes: int = 10
    per_class: int = 20
    canvas: int = 128
    association: str = "category"
    unseen_classes: int = 2
    train_fraction: float = 0.8
    jitter_frac: float = 0.02  # sketch jitter sigma, fraction of canvas diagonal
    point_dropout: float = 0.10
    min_outline_iou: float = 0.8
    area_range: tuple[float, float] = (0.10, 0.18)  # foreground fraction
    compose_pairs: bool = False  # add a second shape per photo (inference demos)

    def validate(self) -> None:
        if self.num_classes < 4:
            raise DatasetError("generator needs at least 4 classes")
        if self.num_classes > len(FAMILIES):
            raise DatasetError(f"at most {len(FAMILIES)} shape families available")
        if self.per_class < 20:
            raise DatasetError("generator needs at least 20 images per class")
        if self.canvas < 32:
            raise DatasetError("canvas smaller than the minimum shape size (32)")
        if not 0 < self.unseen_classes < self.num_classes:
            raise DatasetError("unseen_classes must leave at least one seen class")
        if self.association not in ("category", "fine_grained"):
            raise DatasetError(f"unknown association {self.association!r}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "per_class": self.per_class,
            "canvas": self.canvas,
            "association": self.association,
            "unseen_classes": self.unseen_classes,
            "train_fraction": self.train_fraction,
            "jitter_frac": self.jitter_frac,
            "point_dropout": self.point_dropout,
            "min_outline_iou": self.min_outline_iou,
            "area_range": list(self.area_range),
            "compose_pairs": self.compose_pairs,
        }


# -- shape families: unit outlines, counterclockwise ------------------------


def _densify(poly: np.ndarray, n: int = OUTLINE_POINTS) -> np.ndarray:
    """Resample a closed polygon to n points spaced evenly by arc length."""
    closed = np.vstack([poly, poly[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.linspace(0.0, total, n, endpoint=False)
    out = np.empty((n, 2))
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    t = (targets - cum[idx]) / np.maximum(seg[idx], 1e-12)
    out = closed[idx] + (closed[idx + 1] - closed[idx]) * t[:, None]
    return out


def _ellipse() -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, OUTLINE_POINTS, endpoint=False)
    return np.stack([np.cos(t), 0.68 * np.sin(t)], axis=1)


def _star() -> np.ndarray:
    pts = []
    for k in range(10):
        r = 1.0 if k % 2 == 0 else 0.45
        a = np.pi / 2 + k * np.pi / 5
        pts.append((r * np.cos(a), -r * np.sin(a)))
    return _densify(np.array(pts))


def _arrow() -> np.ndarray:
    pts = [(-1, -0.28), (0.15, -0.28), (0.15, -0.62), (1, 0), (0.15, 0.62), (0.15, 0.28), (-1, 0.28)]
    return _densify(np.array(pts, dtype=float))


def _letter_t() -> np.ndarray:
    pts = [(-1, -1), (1, -1), (1, -0.45), (0.28, -0.45), (0.28, 1), (-0.28, 1), (-0.28, -0.45), (-1, -0.45)]
    return _densify(np.array(pts, dtype=float))


def _letter_l() -> np.ndarray:
    pts = [(-0.85, -1), (-0.25, -1), (-0.25, 0.45), (0.85, 0.45), (0.85, 1), (-0.85, 1)]
    return _densify(np.array(pts, dtype=float))


def _plus() -> np.ndarray:
    a = 0.32
    pts = [(-a, -1), (a, -1), (a, -a), (1, -a), (1, a), (a, a), (a, 1), (-a, 1), (-a, a), (-1, a), (-1, -a), (-a, -a)]
    return _densify(np.array(pts, dtype=float))


def _triangle() -> np.ndarray:
    pts = [(0, -1), (0.95, 0.8), (-0.95, 0.8)]
    return _densify(np.array(pts, dtype=float))


def _crescent() -> np.ndarray:
    outer = np.linspace(-0.75 * np.pi, 0.75 * np.pi, 60)
    inner = np.linspace(0.55 * np.pi, -0.55 * np.pi, 60)
    arc1 = np.stack([np.cos(outer), np.sin(outer)], axis=1)
    arc2 = np.stack([0.55 + 0.75 * np.cos(inner), 0.75 * np.sin(inner)], axis=1)
    return _densify(np.vstack([arc1, arc2]))


def _letter_h() -> np.ndarray:
    a = 0.3
    pts = [(-1, -1), (-1 + 2 * a, -1), (-1 + 2 * a, -a), (1 - 2 * a, -a), (1 - 2 * a, -1), (1, -1),
           (1, 1), (1 - 2 * a, 1), (1 - 2 * a, a), (-1 + 2 * a, a), (-1 + 2 * a, 1), (-1, 1)]
    return _densify(np.array(pts, dtype=float))


def _heart() -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, OUTLINE_POINTS, endpoint=False)
    x = np.sin(t) ** 3
    y = -(13 * np.cos(t) - 5 * np.cos(2 * t) - 2 * np.cos(3 * t) - np.cos(4 * t)) / 16.0
    return np.stack([x, y], axis=1) * 0.95


def _diamond() -> np.ndarray:
    pts = [(0, -1), (0.7, 0), (0, 1), (-0.7, 0)]
    return _densify(np.array(pts, dtype=float))


def _letter_u() -> np.ndarray:
    a = 0.34
    bottom = np.stack([0.0 + (1 - 0.0) * np.cos(np.linspace(np.pi, 2 * np.pi, 30)),
                       0.35 + 0.6 * np.sin(np.linspace(np.pi, 2 * np.pi, 30)) * -1], axis=1)
    pts = [(-1, -1), (-1 + 2 * a, -1), (-1 + 2 * a, 0.35)]
    inner = [(x * (1 - 2 * a), 0.35 + (y - 0.35) * 0.35) for x, y in bottom[::-1]]
    pts += inner
    pts += [(1 - 2 * a, -1), (1, -1), (1, 0.35)]
    outer = [(x, y) for x, y in bottom]
    pts += outer
    pts += [(-1, 0.35)]
    return _densify(np.array(pts, dtype=float))


def _ring_gear() -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, OUTLINE_POINTS, endpoint=False)
    r = 1.0 + 0.16 * np.cos(7 * t)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1) * 0.9


FAMILIES: list[tuple[str, callable]] = [
    ("ellipse", _ellipse),
    ("star", _star),
    ("arrow", _arrow),
    ("letter_t", _letter_t),
    ("letter_l", _letter_l),
    ("plus", _plus),
    ("triangle", _triangle),
    ("crescent", _crescent),
    ("letter_h", _letter_h),
    ("heart", _heart),
    ("diamond", _diamond),
    ("gear", _ring_gear),
]


# -- raster helpers ----------------------------------------------------------


def fill_polygon(points: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Binary fill of a closed polygon given as (N, 2) canvas (x, y) points."""
    h, w = hw
    img = Image.new("L", (w, h), 0)
    ImageDraw.Draw(img).polygon([(float(x), float(y)) for x, y in points], fill=1)
    return np.asarray(img, dtype=np.uint8)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def _smooth_field(rng: np.random.Generator, hw: tuple[int, int], cells: int = 5) -> np.ndarray:
    """Low-frequency noise in [0, 1]: coarse grid, bilinear upscale."""
    h, w = hw
    grid = rng.uniform(0.0, 1.0, size=(cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = (
        grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + grid[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
        + grid[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
        + grid[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    )
    return g


# -- instance synthesis ------------------------------------------------------


def _place_outline(rng: np.random.Generator, family: int, cfg: GeneratorConfig) -> np.ndarray:
    """One deformed, scaled, positioned outline in canvas coordinates."""
    base = FAMILIES[family][1]()
    poly = _densify(base, OUTLINE_POINTS)

    # sinusoidal warp keeps the outline smooth but varies the silhouette
    amp = rng.uniform(0.015, 0.05)
    k = rng.uniform(1.5, 3.5)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    poly = poly + amp * np.stack(
        [np.sin(k * poly[:, 1] * np.pi + ph[0]), np.sin(k * poly[:, 0] * np.pi + ph[1])], axis=1
    )

    theta = np.deg2rad(rng.uniform(-30, 30))
    aspect = rng.uniform(0.85, 1.18, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    poly = (poly * aspect) @ rot.T

    # scale to a target foreground area fraction
    area_unit = 0.5 * abs(
        np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    )
    frac = rng.uniform(*cfg.area_range)
    scale = np.sqrt(frac * cfg.canvas * cfg.canvas / max(area_unit, 1e-9))
    poly = poly * scale

    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    span = hi - lo
    max_off = cfg.canvas - PLACEMENT_MARGIN - span
    if np.any(max_off <= PLACEMENT_MARGIN):
        # shape did not fit (small canvas, elongated family): shrink to fit
        shrink = min((cfg.canvas - 2 * PLACEMENT_MARGIN) / span.max(), 1.0) * 0.95
        poly = poly * shrink
        lo = poly.min(axis=0)
        hi = poly.max(axis=0)
        span = hi - lo
        max_off = cfg.canvas - PLACEMENT_MARGIN - span
    off = np.array([
        rng.uniform(PLACEMENT_MARGIN, max(max_off[0], PLACEMENT_MARGIN + 1e-6)),
        rng.uniform(PLACEMENT_MARGIN, max(max_off[1], PLACEMENT_MARGIN + 1e-6)),
    ])
    return poly - lo + off


def _render_photo(
    rng: np.random.Generator, outlines: list[np.ndarray], cfg: GeneratorConfig
) -> tuple[np.ndarray, np.ndarray]:
    hw = (cfg.canvas, cfg.canvas)
    mask = np.zeros(hw, dtype=np.uint8)
    for outline in outlines:
        mask |= fill_polygon(outline, hw)

    bg_h = rng.uniform(0.46, 0.68)
    bg = _hsv_to_rgb(
        np.full(hw, bg_h) + 0.05 * (_smooth_field(rng, hw) - 0.5),
        np.full(hw, rng.uniform(0.30, 0.55)),
        0.35 + 0.35 * _smooth_field(rng, hw),
    )

    warm = rng.uniform(0.0, 0.13) if rng.uniform() < 0.8 else rng.uniform(0.88, 1.0) % 1.0
    fg = _hsv_to_rgb(
        np.full(hw, warm),
        np.full(hw, rng.uniform(0.65, 0.95)),
        np.full(hw, rng.uniform(0.60, 0.95)) + 0.08 * (_smooth_field(rng, hw) - 0.5),
    )

    photo = np.where(mask[:, :, None] > 0, fg, bg).astype(np.float32)
    photo += rng.normal(0, 0.01, size=photo.shape).astype(np.float32)
    return np.clip(photo, 0.0, 1.0), mask


def _sketch_from_outline(
    rng: np.random.Generator,
    outline: np.ndarray,
    gt_mask: np.ndarray,
    cfg: GeneratorConfig,
    class_id: int,
    instance_id: int,
) -> VectorSketch:
    """Jittered freehand tracing; regenerated until its fill overlaps gt."""
    diag = np.sqrt(2.0) * cfg.canvas
    sigma = cfg.jitter_frac * diag
    hw = (cfg.canvas, cfg.canvas)
    for attempt in range(20):
        pts = outline + rng.normal(0.0, sigma, size=outline.shape)
        keep = rng.uniform(size=len(pts)) >= cfg.point_dropout
        keep[:2] = True  # never drop below a drawable stroke
        pts = pts[keep]
        pts = np.clip(pts, 0.0, cfg.canvas - 1e-3)
        if mask_iou(gt_mask, fill_polygon(pts, hw)) >= cfg.min_outline_iou:
            break
        sigma *= 0.7  # too sloppy: steady the hand and retrace
    n_strokes = int(rng.integers(1, 4))
    cuts = sorted(rng.choice(np.arange(2, len(pts) - 2), size=n_strokes - 1, replace=False)) if n_strokes > 1 else []
    bounds = [0, *cuts, len(pts)]
    strokes = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a >= 2:
            strokes.append([(float(x), float(y)) for x, y in pts[a:b]])
    if not strokes:
        strokes = [[(float(x), float(y)) for x, y in pts]]
    return VectorSketch(strokes=strokes, canvas_size=hw, class_id=class_id, instance_id=instance_id)


def generate_shapes_world(config: GeneratorConfig, seed: int) -> PairedDataset:
    """Build the full paired corpus; byte-identical for identical (config, seed)."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))

    pairs: list[tuple[VectorSketch, PhotoRecord]] = []
    instance_id = 0
    for class_id in range(config.num_classes):
        for _ in range(config.per_class):
            outline = _place_outline(rng, class_id, config)
            outlines = [outline]
            if config.compose_pairs:
                other = int(rng.integers(0, config.num_classes))
                outlines.append(_place_outline(rng, other, config))
            photo_px, gt = _render_photo(rng, outlines, config)
            sketch = _sketch_from_outline(rng, outline, fill_polygon(outline, gt.shape), config, class_id, instance_id)
            if config.compose_pairs and len(outlines) > 1:
                extra = _sketch_from_outline(
                    rng, outlines[1], fill_polygon(outlines[1], gt.shape), config, class_id, instance_id
                )
                sketch.strokes.extend(extra.strokes)
            photo = PhotoRecord(pixels=photo_px, class_id=class_id, instance_id=instance_id, gt_mask=gt)
            pairs.append((sketch, photo))
            instance_id += 1

    class_order = list(rng.permutation(config.num_classes))
    unseen = sorted(int(c) for c in class_order[: config.unseen_classes])
    seen = sorted(int(c) for c in class_order[config.unseen_classes :])

    train_ids: list[int] = []
    test_ids: list[int] = []
    for class_id in seen:
        ids = [p.instance_id for _, p in pairs if p.class_id == class_id]
        ids = list(rng.permutation(ids))
        cut = int(round(config.train_fraction * len(ids)))
        train_ids.extend(int(i) for i in ids[:cut])
        test_ids.extend(int(i) for i in ids[cut:])

    return PairedDataset(
        pairs=pairs,
        association=config.association,
        class_split=(seen, unseen),
        sample_split=(sorted(train_ids), sorted(test_ids)),
    )


def dataset_checksum(dataset: PairedDataset) -> str:
    """Content hash over photos, masks, sketches and splits."""
    digest = hashlib.sha256()
    for sketch, photo in dataset.pairs:
        digest.update(np.ascontiguousarray(photo.pixels).tobytes())
        if photo.gt_mask is not None:
            digest.update(np.ascontiguousarray(photo.gt_mask).tobytes())
        digest.update(sketch.to_json().encode())
    digest.update(repr(dataset.class_split).encode())
    digest.update(repr(dataset.sample_split).encode())
    return digest.hexdigest()


def class_names(config: GeneratorConfig) -> list[str]:
    return [name for name, _ in FAMILIES[: config.num_classes]]
