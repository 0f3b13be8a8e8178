"""Sketch-probe correlation maps and differentiable mask construction.

The pipeline is: cosine correlation between the sketch's global feature and
every photo patch feature, a temperature-controlled sigmoid around a fixed
threshold, bilinear upscale to photo resolution, and per-pixel multiplication
with the photo. Every step is differentiable; binarisation is inference-only.

The sigmoid is the *increasing* form sigma((C - threshold) / tau): high
correlation keeps pixels, low correlation suppresses them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS_NORM = 1e-12


class MaskError(ValueError):
    pass


@dataclass
class CorrelationMap:
    values: torch.Tensor  # (h', w') cosine similarities in [-1, 1]
    grid_shape: tuple[int, int]


@dataclass
class SoftMask:
    values: torch.Tensor  # (H, W) in [0, 1]
    source_temperature: float


@dataclass
class HardMask:
    values: torch.Tensor  # (H, W) in {0, 1}


def cosine_correlation(s: torch.Tensor, p_grid: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between probe ``s`` (..., d) and grid (..., h', w', d)."""
    s_norm = torch.linalg.vector_norm(s, dim=-1)
    p_norm = torch.linalg.vector_norm(p_grid, dim=-1)
    if (s_norm < EPS_NORM).any() or (p_norm < EPS_NORM).any():
        raise MaskError("zero-norm feature vector in correlation map")
    num = (p_grid * s[..., None, None, :]).sum(dim=-1)
    return num / (p_norm * s_norm[..., None, None])


def correlation_map(s: torch.Tensor, p_grid: torch.Tensor) -> CorrelationMap:
    """Sketch-guided correlation map for one photo.

    ``s``: (1, d) or (d,) global sketch feature; ``p_grid``: (h', w', d).
    """
    s = s.reshape(-1)
    values = cosine_correlation(s, p_grid)
    return CorrelationMap(values=values, grid_shape=tuple(p_grid.shape[:2]))


def soft_threshold(c: torch.Tensor | CorrelationMap, tau: float, threshold: float = 0.5) -> torch.Tensor:
    """Differentiable thresholding: sigmoid((c - threshold) / tau).

    Exactly 0.5 at ``c == threshold``; approaches a step function as tau -> 0+.
    """
    if tau <= 0:
        raise MaskError(f"tau must be positive, got {tau}")
    values = c.values if isinstance(c, CorrelationMap) else c
    return torch.sigmoid((values - threshold) / tau)


def upscale(grid: torch.Tensor, out: tuple[int, int]) -> torch.Tensor:
    """Bilinear upscale of (..., h', w') to (..., H, W).

    Alignment convention (frozen): corner grid cells map to corner pixel
    centers (``align_corners=True``), so constant grids stay constant and a
    same-size call is the identity.
    """
    out_h, out_w = out
    lead = grid.shape[:-2]
    if out_h < grid.shape[-2] or out_w < grid.shape[-1]:
        raise MaskError(f"upscale target {out} smaller than grid {grid.shape[-2:]}")
    x = grid.reshape(1, -1, *grid.shape[-2:]) if lead else grid[None, None]
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=True)
    return y.reshape(*lead, out_h, out_w)


def apply_mask(photo: torch.Tensor, mask: torch.Tensor | SoftMask) -> torch.Tensor:
    """Per-pixel product, mask broadcast over channels.

    ``photo``: (..., H, W, 3) or (..., 3, H, W); mask (..., H, W).
    """
    values = mask.values if isinstance(mask, SoftMask) else mask
    if photo.shape[-1] == 3 and photo.shape[-3:-1] == values.shape[-2:]:
        return photo * values[..., None]
    if photo.shape[-3] == 3 and photo.shape[-2:] == values.shape[-2:]:
        return photo * values[..., None, :, :]
    raise MaskError(f"mask shape {tuple(values.shape)} does not match photo {tuple(photo.shape)}")


def binarize(soft: torch.Tensor | SoftMask, threshold: float = 0.5) -> HardMask:
    """Hard threshold; ties (value == threshold) go to foreground."""
    values = soft.values if isinstance(soft, SoftMask) else soft
    return HardMask(values=(values >= threshold).to(values.dtype))


def soft_mask_for_photo(
    s: torch.Tensor,
    p_grid: torch.Tensor,
    out_hw: tuple[int, int],
    tau: float,
    threshold: float = 0.5,
) -> torch.Tensor:
    """Full differentiable path: correlation -> sigmoid -> upscale."""
    corr = cosine_correlation(s.reshape(-1) if s.dim() <= 2 else s, p_grid)
    return upscale(soft_threshold(corr, tau, threshold), out_hw)
