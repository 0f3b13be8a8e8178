import math

import numpy as np
import pytest
import torch

from sketchseg.maskgen import (
    MaskError,
    apply_mask,
    binarize,
    correlation_map,
    cosine_correlation,
    soft_threshold,
    upscale,
)


def bilinear_oracle(grid: np.ndarray, out_hw):
    """Closed-form align-corners bilinear interpolation, plain loops."""
    h_in, w_in = grid.shape
    h_out, w_out = out_hw
    out = np.zeros(out_hw)
    for i in range(h_out):
        for j in range(w_out):
            sy = i * (h_in - 1) / (h_out - 1) if h_out > 1 else 0.0
            sx = j * (w_in - 1) / (w_out - 1) if w_out > 1 else 0.0
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h_in - 1), min(x0 + 1, w_in - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                grid[y0, x0] * (1 - fy) * (1 - fx)
                + grid[y1, x0] * fy * (1 - fx)
                + grid[y0, x1] * (1 - fy) * fx
                + grid[y1, x1] * fy * fx
            )
    return out


class TestCorrelationMap:
    def test_identical_vectors_give_one(self):
        s = torch.randn(8, dtype=torch.float64)
        grid = s.expand(4, 4, 8).clone()
        cm = correlation_map(s, grid)
        assert torch.allclose(cm.values, torch.ones(4, 4, dtype=torch.float64), atol=1e-12)
        assert cm.grid_shape == (4, 4)

    def test_orthogonal_gives_zero(self):
        s = torch.tensor([1.0, 0.0], dtype=torch.float64)
        grid = torch.tensor([0.0, 1.0], dtype=torch.float64).expand(3, 3, 2).clone()
        cm = correlation_map(s, grid)
        assert torch.allclose(cm.values, torch.zeros(3, 3, dtype=torch.float64), atol=1e-12)

    def test_hand_computed_cell(self):
        s = torch.tensor([1.0, 0.0], dtype=torch.float64)
        grid = torch.zeros(1, 1, 2, dtype=torch.float64)
        grid[0, 0] = torch.tensor([1.0, 1.0]) / math.sqrt(2.0)
        cm = correlation_map(s, grid)
        assert abs(cm.values[0, 0].item() - math.sqrt(2) / 2) < 1e-12

    def test_zero_norm_rejected(self):
        s = torch.zeros(4, dtype=torch.float64)
        grid = torch.randn(2, 2, 4, dtype=torch.float64)
        with pytest.raises(MaskError):
            correlation_map(s, grid)
        with pytest.raises(MaskError):
            correlation_map(torch.randn(4, dtype=torch.float64), torch.zeros(2, 2, 4, dtype=torch.float64))

    def test_oracle_on_random_grids(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.normal(size=6)
            grid = rng.normal(size=(3, 5, 6))
            got = cosine_correlation(torch.from_numpy(s), torch.from_numpy(grid)).numpy()
            for u in range(3):
                for v in range(5):
                    p = grid[u, v]
                    want = float(np.dot(s, p) / (np.linalg.norm(s) * np.linalg.norm(p)))
                    assert abs(got[u, v] - want) < 1e-10


class TestSoftThreshold:
    def test_center_is_half(self):
        c = torch.full((3, 3), 0.5, dtype=torch.float64)
        for tau in (0.01, 0.1, 1.0):
            assert torch.allclose(soft_threshold(c, tau), torch.full((3, 3), 0.5, dtype=torch.float64))

    def test_one_tau_above_center(self):
        tau = 0.07
        c = torch.tensor([[0.5 + tau]], dtype=torch.float64)
        want = 1.0 / (1.0 + math.exp(-1.0))
        assert abs(soft_threshold(c, tau).item() - want) < 1e-12

    def test_saturation(self):
        c = torch.ones(4, 4, dtype=torch.float64)
        assert (soft_threshold(c, 0.01) >= 1 - 1e-9).all()

    def test_tau_must_be_positive(self):
        with pytest.raises(MaskError):
            soft_threshold(torch.zeros(2, 2), 0.0)
        with pytest.raises(MaskError):
            soft_threshold(torch.zeros(2, 2), -0.1)

    def test_monotone_in_c(self):
        c = torch.linspace(-1, 1, 101, dtype=torch.float64)
        out = soft_threshold(c, 0.1)
        assert (out.diff() > 0).all()

    def test_oracle_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            c = rng.uniform(-1, 1, size=(4, 4))
            tau = float(rng.uniform(0.02, 0.5))
            thr = float(rng.uniform(0.2, 0.8))
            got = soft_threshold(torch.from_numpy(c), tau, thr).numpy()
            want = 1.0 / (1.0 + np.exp(-(c - thr) / tau))
            assert np.max(np.abs(got - want)) < 1e-10


class TestUpscale:
    def test_constant_grid(self):
        grid = torch.full((3, 3), 0.7, dtype=torch.float64)
        out = upscale(grid, (10, 12))
        assert torch.allclose(out, torch.full((10, 12), 0.7, dtype=torch.float64))

    def test_row_ramp(self):
        grid = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
        out = upscale(grid, (2, 4))
        want = torch.tensor([0.0, 1 / 3, 2 / 3, 1.0], dtype=torch.float64)
        assert torch.allclose(out[0], want, atol=1e-12)
        assert torch.allclose(out[1], want, atol=1e-12)

    def test_identity_at_same_size(self):
        grid = torch.rand(5, 7, dtype=torch.float64)
        assert torch.equal(upscale(grid, (5, 7)), grid)

    def test_rejects_downscale(self):
        with pytest.raises(MaskError):
            upscale(torch.rand(4, 4), (3, 8))

    def test_matches_closed_form_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            grid = rng.uniform(size=(4, 5))
            out = upscale(torch.from_numpy(grid), (9, 11)).numpy()
            want = bilinear_oracle(grid, (9, 11))
            assert np.max(np.abs(out - want)) < 1e-10


class TestApplyMask:
    def test_identity_mask(self):
        photo = torch.rand(6, 6, 3, dtype=torch.float64)
        assert torch.equal(apply_mask(photo, torch.ones(6, 6, dtype=torch.float64)), photo)

    def test_zero_mask(self):
        photo = torch.rand(6, 6, 3, dtype=torch.float64)
        assert torch.equal(
            apply_mask(photo, torch.zeros(6, 6, dtype=torch.float64)), torch.zeros(6, 6, 3, dtype=torch.float64)
        )

    def test_checkerboard_exhaustive(self):
        photo = torch.rand(8, 8, 3, dtype=torch.float64)
        mask = torch.zeros(8, 8, dtype=torch.float64)
        mask[::2, ::2] = 1.0
        mask[1::2, 1::2] = 1.0
        out = apply_mask(photo, mask)
        for i in range(8):
            for j in range(8):
                expect = photo[i, j] if mask[i, j] == 1 else torch.zeros(3, dtype=torch.float64)
                assert torch.equal(out[i, j], expect)

    def test_channels_first_layout(self):
        photo = torch.rand(2, 3, 5, 5)
        mask = torch.rand(2, 5, 5)
        out = apply_mask(photo, mask)
        assert out.shape == photo.shape
        assert torch.allclose(out[0, 1], photo[0, 1] * mask[0])

    def test_shape_mismatch(self):
        with pytest.raises(MaskError):
            apply_mask(torch.rand(4, 4, 3), torch.rand(5, 5))


class TestBinarize:
    def test_tie_goes_to_foreground(self):
        assert (binarize(torch.full((3, 3), 0.5)).values == 1).all()

    def test_below_threshold(self):
        assert (binarize(torch.full((3, 3), 0.49)).values == 0).all()

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            field = rng.uniform(size=(6, 6))
            thr = float(rng.uniform(0.2, 0.8))
            got = binarize(torch.from_numpy(field), thr).values.numpy()
            want = np.array([[1.0 if v >= thr else 0.0 for v in row] for row in field])
            assert np.array_equal(got, want)


class TestPipelineProperties:
    def test_single_cell_monotonicity(self):
        rng = np.random.default_rng(4)
        c = torch.from_numpy(rng.uniform(-1, 1, size=(4, 4)))
        base = upscale(soft_threshold(c, 0.1), (16, 16))
        for u in range(4):
            for v in range(4):
                bumped = c.clone()
                bumped[u, v] += 0.05
                out = upscale(soft_threshold(bumped, 0.1), (16, 16))
                assert (out >= base - 1e-12).all()

    def test_tau_limit_matches_step(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            c = rng.uniform(-1, 1, size=(4, 4))
            c = np.where(np.abs(c - 0.5) < 1e-3, c - 0.1, c)  # keep cells off the knife edge
            grid = torch.from_numpy(c)
            # output size chosen so interpolation weights are thirds, never 1/2
            soft_path = binarize(upscale(soft_threshold(grid, 1e-4), (10, 10))).values
            step = (grid - 0.5 >= 0).double()
            step_path = binarize(upscale(step, (10, 10))).values
            assert torch.equal(soft_path, step_path)
