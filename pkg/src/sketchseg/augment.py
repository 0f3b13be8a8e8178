"""Sketch-partitioning augmentation for part-level queries.

A sketch is split into ``n`` angular sectors about its centroid. The first
boundary ray gets a random slope; the rest are spaced exactly 360/n degrees
apart. Strokes crossing a boundary are cut at the crossing point, which is
duplicated into both adjacent parts so each half still draws continuously.

Random slopes are drawn on a dyadic grid (k / 2**20 degrees) so that adding
the integer sector step and reducing mod 360 stays exact in float64 - the
slope-spacing invariant holds with equality, not within a tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data.types import DatasetError, VectorSketch

SLOPE_GRID = 1 << 20


@dataclass
class SketchPartition:
    parts: list[VectorSketch]
    centroid: tuple[float, float]
    slopes_deg: list[float]


def centroid(sketch: VectorSketch) -> tuple[float, float]:
    """Unweighted mean of every stroke point."""
    pts = sketch.points()
    if len(pts) == 0:
        raise DatasetError("cannot take the centroid of an empty sketch")
    cx, cy = pts.mean(axis=0)
    return float(cx), float(cy)


def _sector_of(angle_deg: float, m1: float, step: float, n: int) -> int:
    rel = (angle_deg - m1) % 360.0
    return min(int(rel // step), n - 1)


def _ray_crossings(
    p: np.ndarray, q: np.ndarray, center: np.ndarray, slopes_deg: list[float]
) -> list[tuple[float, np.ndarray]]:
    """Interior intersections of segment p->q with each boundary ray."""
    out = []
    d = q - p
    for theta in slopes_deg:
        rad = math.radians(theta)
        u = np.array([math.cos(rad), math.sin(rad)])
        det = u[0] * (-d[1]) - (-d[0]) * u[1]
        if abs(det) < 1e-15:
            continue
        rhs = p - center
        s = (rhs[0] * (-d[1]) - (-d[0]) * rhs[1]) / det
        t = (u[0] * rhs[1] - u[1] * rhs[0]) / det
        if s > 1e-12 and 1e-12 < t < 1.0 - 1e-12:
            out.append((t, p + t * d))
    out.sort(key=lambda item: item[0])
    return out


def partition(
    sketch: VectorSketch, n: int, seed: int, first_slope: float | None = None
) -> SketchPartition:
    """Split ``sketch`` into ``n`` angular-sector parts about its centroid.

    Every original point lands in exactly one part (half-open sectors,
    boundary points belong to the sector whose lower angle they sit on).
    Parts can be geometrically empty for very one-sided sketches.
    ``first_slope`` pins the first boundary ray instead of drawing it.
    """
    if n < 2:
        raise DatasetError(f"partition needs n >= 2, got {n}")
    cx, cy = centroid(sketch)
    center = np.array([cx, cy])

    rng = np.random.Generator(np.random.PCG64(seed))
    m1 = float(rng.integers(0, 360 * SLOPE_GRID)) / SLOPE_GRID
    if first_slope is not None:
        m1 = first_slope % 360.0
    step = 360.0 / n
    slopes = [(m1 + i * step) % 360.0 for i in range(n)]

    part_strokes: list[list[list[tuple[float, float]]]] = [[] for _ in range(n)]

    def angle_of(pt: np.ndarray) -> float:
        return math.degrees(math.atan2(pt[1] - cy, pt[0] - cx)) % 360.0

    for stroke in sketch.strokes:
        if len(stroke) < 2:
            continue
        pts = np.asarray(stroke, dtype=np.float64)
        current: list[tuple[float, float]] = [tuple(pts[0])]
        current_sector: int | None = _sector_of(angle_of(pts[0]), m1, step, n)
        for i in range(len(pts) - 1):
            p, q = pts[i], pts[i + 1]
            for _, cross in _ray_crossings(p, q, center, slopes):
                cross_t = (float(cross[0]), float(cross[1]))
                current.append(cross_t)
                if current_sector is None:
                    # crossing-to-crossing piece with no original point inside
                    mid = (np.asarray(current[0]) + cross) / 2.0
                    current_sector = _sector_of(angle_of(mid), m1, step, n)
                if len(current) >= 2:
                    part_strokes[current_sector].append(current)
                current = [cross_t]
                current_sector = None
            q_sector = _sector_of(angle_of(q), m1, step, n)
            current.append((float(q[0]), float(q[1])))
            if current_sector is None:
                current_sector = q_sector
        if len(current) >= 2 and current_sector is not None:
            part_strokes[current_sector].append(current)

    parts = [
        VectorSketch(
            strokes=strokes,
            canvas_size=sketch.canvas_size,
            class_id=sketch.class_id,
            instance_id=sketch.instance_id,
        )
        for strokes in part_strokes
    ]
    return SketchPartition(parts=parts, centroid=(cx, cy), slopes_deg=slopes)


def xor_combine(m_a: torch.Tensor, m_b: torch.Tensor) -> torch.Tensor:
    """Soft XOR ``a + b - 2ab``: boolean XOR on binary inputs, differentiable."""
    if m_a.shape != m_b.shape:
        raise DatasetError(f"mask shapes {tuple(m_a.shape)} vs {tuple(m_b.shape)} differ")
    return m_a + m_b - 2.0 * m_a * m_b


@dataclass(frozen=True)
class AugmentedSample:
    """A batch entry, optionally carrying the partitioned sketch halves."""

    sample: object  # TrainSample
    parts: tuple[VectorSketch, ...] | None = None


def augment_batch(batch: list, rate: float = 0.5, n: int = 2, seed: int = 0) -> list[AugmentedSample]:
    """Replace floor(rate * k) samples with partitioned variants.

    Selection and the partition slopes are deterministic given ``seed``. A
    sample whose partition produced an empty (undrawable) part is left
    unaugmented.
    """
    if not 0.0 <= rate <= 1.0:
        raise DatasetError(f"augment rate must be in [0, 1], got {rate}")
    k = len(batch)
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = set(rng.permutation(k)[: int(rate * k)].tolist())
    out: list[AugmentedSample] = []
    for idx, sample in enumerate(batch):
        if idx not in chosen:
            out.append(AugmentedSample(sample=sample))
            continue
        split = partition(sample.sketch, n=n, seed=int(rng.integers(0, 2**31 - 1)))
        drawable = all(any(len(s) >= 2 for s in part.strokes) for part in split.parts)
        if not drawable:
            out.append(AugmentedSample(sample=sample))
        else:
            out.append(AugmentedSample(sample=sample, parts=tuple(split.parts)))
    return out
