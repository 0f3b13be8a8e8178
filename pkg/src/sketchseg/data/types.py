"""Core dataset records: vector sketches, photos, and paired corpora.

Ground-truth masks ride along on :class:`PhotoRecord` for evaluation only.
The training-side iterator (:meth:`PairedDataset.train_samples`) yields
:class:`TrainSample`, a record type that simply has no mask field, so a
trainer cannot touch masks even by accident.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

Point = tuple[float, float]
Stroke = list[Point]


class DatasetError(ValueError):
    """Raised on malformed dataset layouts or invalid configurations."""


@dataclass
class VectorSketch:
    """Freehand sketch as ordered polylines on a fixed canvas."""

    strokes: list[Stroke]
    canvas_size: tuple[int, int]  # (height, width)
    class_id: int = -1
    instance_id: int | None = None

    def validate(self) -> None:
        h, w = self.canvas_size
        if not self.strokes or not any(len(s) >= 2 for s in self.strokes):
            raise DatasetError("sketch needs at least one stroke with two points")
        for stroke in self.strokes:
            for x, y in stroke:
                if not (0 <= x < w and 0 <= y < h):
                    raise DatasetError(
                        f"point ({x}, {y}) outside canvas {h}x{w}"
                    )

    def points(self) -> np.ndarray:
        """All stroke points as an (N, 2) array of (x, y)."""
        if not self.strokes:
            return np.zeros((0, 2), dtype=np.float64)
        return np.concatenate([np.asarray(s, dtype=np.float64) for s in self.strokes])

    def to_json(self) -> str:
        return json.dumps(
            {
                "canvas": [self.canvas_size[0], self.canvas_size[1]],
                "strokes": [[[float(x), float(y)] for x, y in s] for s in self.strokes],
            }
        )

    @classmethod
    def from_json(cls, text: str, class_id: int = -1, instance_id: int | None = None) -> "VectorSketch":
        try:
            obj = json.loads(text)
            canvas = obj["canvas"]
            strokes = [[(float(x), float(y)) for x, y in stroke] for stroke in obj["strokes"]]
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise DatasetError(f"malformed sketch JSON: {exc}") from exc
        return cls(
            strokes=strokes,
            canvas_size=(int(canvas[0]), int(canvas[1])),
            class_id=class_id,
            instance_id=instance_id,
        )


@dataclass
class PhotoRecord:
    """One gallery photo; ``gt_mask`` is reachable only via the eval interface."""

    pixels: np.ndarray  # H x W x 3 floats in [0, 1]
    class_id: int
    instance_id: int
    gt_mask: np.ndarray | None = None  # H x W in {0, 1}; evaluation only

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DatasetError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.gt_mask is not None:
            if self.gt_mask.shape != self.pixels.shape[:2]:
                raise DatasetError("gt_mask shape differs from pixels")
            vals = np.unique(self.gt_mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise DatasetError("gt_mask must be binary")


@dataclass(frozen=True)
class TrainSample:
    """Mask-free training record handed to the trainer."""

    sketch: VectorSketch
    photo_pixels: np.ndarray
    class_id: int
    instance_id: int


@dataclass
class PairedDataset:
    """Sketch-photo pairs plus class and sample splits.

    ``pairs`` always keeps the 1:1 link between a sketch and the photo whose
    instance it traces; ``association`` only widens which photos count as
    positives/negatives when sampling.
    """

    pairs: list[tuple[VectorSketch, PhotoRecord]]
    association: str  # "category" | "fine_grained"
    class_split: tuple[list[int], list[int]] = field(default_factory=lambda: ([], []))
    sample_split: tuple[list[int], list[int]] = field(default_factory=lambda: ([], []))

    def __post_init__(self) -> None:
        if self.association not in ("category", "fine_grained"):
            raise DatasetError(f"unknown association {self.association!r}")
        seen, unseen = self.class_split
        if set(seen) & set(unseen):
            raise DatasetError("seen and unseen class sets overlap")
        train, test = self.sample_split
        if set(train) & set(test):
            raise DatasetError("train and test sample ids overlap")

    # -- training interface (no masks) ------------------------------------

    def train_samples(self) -> list[TrainSample]:
        """Training view: seen-class train-split pairs, mask field absent."""
        train_ids = set(self.sample_split[0])
        out = []
        for sketch, photo in self.pairs:
            if photo.instance_id in train_ids:
                out.append(
                    TrainSample(
                        sketch=sketch,
                        photo_pixels=photo.pixels,
                        class_id=photo.class_id,
                        instance_id=photo.instance_id,
                    )
                )
        return out

    def photos_of_class(self, class_id: int, within: set[int] | None = None) -> list[PhotoRecord]:
        return [
            p
            for _, p in self.pairs
            if p.class_id == class_id and (within is None or p.instance_id in within)
        ]

    def negative_pool(
        self,
        anchor_class: int,
        anchor_instance: int,
        regime: str,
        within: set[int] | None = None,
    ) -> list[int]:
        """Pair indices eligible as negatives for the given anchor.

        Category regime: any photo of a different class. Fine-grained: a
        different instance of the same class. Never the anchor's positive.
        """
        if regime not in ("category", "fine_grained"):
            raise DatasetError(f"unknown regime {regime!r}")
        out = []
        for idx, (_, photo) in enumerate(self.pairs):
            if within is not None and photo.instance_id not in within:
                continue
            if regime == "category":
                if photo.class_id != anchor_class:
                    out.append(idx)
            else:
                if photo.class_id == anchor_class and photo.instance_id != anchor_instance:
                    out.append(idx)
        return out

    # -- evaluation interface (masks allowed) ------------------------------

    def eval_pairs(self, which: str = "seen_test") -> list[tuple[VectorSketch, PhotoRecord]]:
        """Held-out pairs for evaluation. ``which``: seen_test | unseen | all."""
        seen, unseen = map(set, self.class_split)
        test_ids = set(self.sample_split[1])
        out = []
        for sketch, photo in self.pairs:
            if which == "seen_test" and photo.class_id in seen and photo.instance_id in test_ids:
                out.append((sketch, photo))
            elif which == "unseen" and photo.class_id in unseen:
                out.append((sketch, photo))
            elif which == "all":
                out.append((sketch, photo))
        return out

    def subset(self, instance_ids: set[int]) -> "PairedDataset":
        kept = [(s, p) for s, p in self.pairs if p.instance_id in instance_ids]
        train, test = self.sample_split
        return replace(
            self,
            pairs=kept,
            sample_split=(
                [i for i in train if i in instance_ids],
                [i for i in test if i in instance_ids],
            ),
        )
