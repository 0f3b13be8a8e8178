import math

import numpy as np
import pytest
import torch

from sketchseg.augment import (
    AugmentedSample,
    augment_batch,
    centroid,
    partition,
    xor_combine,
)
from sketchseg.data import DatasetError, VectorSketch, rasterize


def random_sketch(rng, n_points=40, canvas=64) -> VectorSketch:
    pts = rng.uniform(2, canvas - 2, size=(n_points, 2))
    cut = n_points // 2
    strokes = [
        [(float(x), float(y)) for x, y in pts[:cut]],
        [(float(x), float(y)) for x, y in pts[cut:]],
    ]
    return VectorSketch(strokes=strokes, canvas_size=(canvas, canvas), class_id=0)


def point_angle(pt, c):
    return math.degrees(math.atan2(pt[1] - c[1], pt[0] - c[0])) % 360.0


class TestCentroid:
    def test_symmetric_square(self):
        sk = VectorSketch(
            strokes=[[(0.0, 0.0), (2.0, 0.0)], [(0.0, 2.0), (2.0, 2.0)]],
            canvas_size=(10, 10), class_id=0,
        )
        assert centroid(sk) == (1.0, 1.0)

    def test_two_point_stroke(self):
        sk = VectorSketch(strokes=[[(0.0, 0.0), (4.0, 0.0)]], canvas_size=(10, 10), class_id=0)
        assert centroid(sk) == (2.0, 0.0)

    def test_empty_rejected(self):
        with pytest.raises(DatasetError):
            centroid(VectorSketch(strokes=[], canvas_size=(10, 10), class_id=0))


class TestPartition:
    def test_n2_horizontal_split(self):
        rng = np.random.default_rng(0)
        sk = random_sketch(rng)
        split = partition(sk, n=2, seed=0, first_slope=0.0)
        cx, cy = split.centroid
        upper, lower = split.parts  # sector [0,180) has dy >= 0 in image coords
        for part, predicate in ((upper, lambda y: y >= cy), (lower, lambda y: y < cy)):
            for stroke in part.strokes:
                interior = [p for p in stroke if tuple(p) in {tuple(q) for s in sk.strokes for q in s}]
                for x, y in interior:
                    assert predicate(y)

    def test_every_point_in_exactly_one_part(self):
        rng = np.random.default_rng(1)
        for n in (2, 3, 4):
            sk = random_sketch(rng)
            split = partition(sk, n=n, seed=3)
            original = {tuple(p) for s in sk.strokes for p in s}
            seen: dict[tuple, int] = {}
            for part in split.parts:
                for stroke in part.strokes:
                    for p in stroke:
                        if tuple(p) in original:
                            seen[tuple(p)] = seen.get(tuple(p), 0) + 1
            assert set(seen) == original
            assert all(count == 1 for count in seen.values())

    def test_points_match_their_angular_sector(self):
        rng = np.random.default_rng(2)
        sk = random_sketch(rng)
        split = partition(sk, n=4, seed=9)
        m1 = split.slopes_deg[0]
        original = {tuple(p) for s in sk.strokes for p in s}
        for sector, part in enumerate(split.parts):
            for stroke in part.strokes:
                for p in stroke:
                    if tuple(p) not in original:
                        continue  # inserted boundary crossing, shared by design
                    rel = (point_angle(p, split.centroid) - m1) % 360.0
                    assert min(int(rel // 90.0), 3) == sector

    def test_exact_slope_spacing(self):
        rng = np.random.default_rng(3)
        for n in (2, 3, 4):
            sk = random_sketch(rng)
            split = partition(sk, n=n, seed=int(rng.integers(0, 1 << 30)))
            step = 360.0 / n
            for a, b in zip(split.slopes_deg, split.slopes_deg[1:]):
                assert (b - a) % 360.0 == step  # exact, not approximate

    def test_boundary_tie_rule(self):
        # centroid at (2, 2); one point exactly on the 0-degree ray
        sk = VectorSketch(
            strokes=[[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)], [(2.0, 2.0), (4.0, 2.0)]],
            canvas_size=(10, 10), class_id=0,
        )
        assert centroid(sk) == (2.0, 2.0)
        split = partition(sk, n=4, seed=0, first_slope=0.0)
        # (4.0, 2.0) sits exactly on slope 0 -> belongs to sector 0, not 3
        sector0_points = {p for s in split.parts[0].strokes for p in s}
        assert (4.0, 2.0) in sector0_points

    def test_n_below_two_rejected(self):
        sk = random_sketch(np.random.default_rng(4))
        with pytest.raises(DatasetError):
            partition(sk, n=1, seed=0)

    def test_deterministic_given_seed(self):
        sk = random_sketch(np.random.default_rng(5))
        a = partition(sk, n=3, seed=42)
        b = partition(sk, n=3, seed=42)
        assert a.slopes_deg == b.slopes_deg
        assert [p.strokes for p in a.parts] == [p.strokes for p in b.parts]

    def test_raster_coverage_of_parts(self, tiny_world):
        _, ds = tiny_world
        width = 2
        covered_violations = 0
        for sketch, _ in ds.pairs[:10]:
            split = partition(sketch, n=2, seed=1)
            full = rasterize(sketch, (64, 64), width)[:, :, 0] < 0.5
            parts_ink = np.zeros_like(full)
            crossings = 0
            for part in split.parts:
                if any(len(s) >= 2 for s in part.strokes):
                    parts_ink |= rasterize(part, (64, 64), width)[:, :, 0] < 0.5
                crossings += max(0, sum(len(s) >= 2 for s in part.strokes))
            missing = int((full & ~parts_ink).sum())
            if missing > 2 * width * max(crossings, 1):
                covered_violations += 1
        assert covered_violations == 0


class TestXor:
    def test_truth_table_exact(self):
        for a in (0.0, 1.0):
            for b in (0.0, 1.0):
                got = xor_combine(torch.tensor([[a]]), torch.tensor([[b]])).item()
                assert got == float(bool(a) ^ bool(b))

    def test_equal_masks_cancel(self):
        m = (torch.rand(6, 6) > 0.5).double()
        assert torch.all(xor_combine(m, m) == 0)

    def test_identity_with_zero(self):
        m = torch.rand(5, 5, dtype=torch.float64)
        assert torch.allclose(xor_combine(m, torch.zeros_like(m)), m)

    def test_half_half(self):
        got = xor_combine(torch.tensor([[0.5]]), torch.tensor([[0.5]])).item()
        assert got == 0.5

    def test_range_preserved(self):
        rng = np.random.default_rng(6)
        a = torch.from_numpy(rng.uniform(size=(10, 10)))
        b = torch.from_numpy(rng.uniform(size=(10, 10)))
        out = xor_combine(a, b)
        assert (out >= 0).all() and (out <= 1).all()

    def test_shape_mismatch(self):
        with pytest.raises(DatasetError):
            xor_combine(torch.zeros(3, 3), torch.zeros(4, 4))


class TestAugmentBatch:
    def _samples(self, tiny_world, k):
        _, ds = tiny_world
        return ds.train_samples()[:k]

    def test_rate_zero_unchanged(self, tiny_world):
        batch = self._samples(tiny_world, 6)
        out = augment_batch(batch, rate=0.0, seed=0)
        assert all(o.parts is None for o in out)
        assert [o.sample for o in out] == batch

    def test_rate_one_all_partitioned(self, tiny_world):
        batch = self._samples(tiny_world, 6)
        out = augment_batch(batch, rate=1.0, n=2, seed=0)
        for o in out:
            assert o.parts is not None and len(o.parts) == 2

    def test_floor_counting(self, tiny_world):
        batch = self._samples(tiny_world, 16)
        out = augment_batch(batch, rate=0.5, seed=1)
        assert sum(o.parts is not None for o in out) == 8
        out7 = augment_batch(batch[:7], rate=0.5, seed=1)
        assert sum(o.parts is not None for o in out7) == 3  # floor(3.5)

    def test_deterministic(self, tiny_world):
        batch = self._samples(tiny_world, 8)
        a = augment_batch(batch, rate=0.5, seed=9)
        b = augment_batch(batch, rate=0.5, seed=9)
        assert [x.parts is None for x in a] == [x.parts is None for x in b]

    def test_invalid_rate(self, tiny_world):
        with pytest.raises(DatasetError):
            augment_batch(self._samples(tiny_world, 2), rate=1.5, seed=0)
