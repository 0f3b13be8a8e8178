"""Shared patch encoder for sketches and photos.

A compact pre-norm transformer: patch projection, learned class token and
position embeddings, and a final norm. Sketch rasters and photos pass through
the same weights and the same (identity) pixel normalisation - inputs are
plain [0, 1] RGB. ``encode`` exposes per-patch features in row-major spatial
order plus the class-token global feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .checkpoints import CheckpointError, load_checkpoint, require_config_match, save_checkpoint

TRAINABLE_SCOPES = ("norm_layers_only", "all", "frozen")


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_size: tuple[int, int] = (128, 128)
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    trainable_scope: str = "norm_layers_only"
    learning_rate: float = 1e-5

    def __post_init__(self) -> None:
        h, w = self.input_size
        if h % self.patch_size or w % self.patch_size:
            raise EncoderError(
                f"patch size {self.patch_size} must divide input {self.input_size}"
            )
        if self.embed_dim % self.heads:
            raise EncoderError("embed_dim must be divisible by heads")
        if self.trainable_scope not in TRAINABLE_SCOPES:
            raise EncoderError(f"unknown trainable scope {self.trainable_scope!r}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.input_size[0] // self.patch_size, self.input_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    @property
    def norm_layer_count(self) -> int:
        # two per block plus the final norm
        return 2 * self.depth + 1

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "EncoderConfig":
        cfg = cls(
            input_size=tuple(d["input_size"]),
            patch_size=d["patch_size"],
            embed_dim=d["embed_dim"],
            depth=d["depth"],
            heads=d["heads"],
            mlp_ratio=d.get("mlp_ratio", 4.0),
        )
        return replace(cfg, **overrides) if overrides else cfg


def category_encoder_config(**overrides) -> EncoderConfig:
    """Category-regime default: only norm layers adapt, at a gentle rate."""
    cfg = EncoderConfig(trainable_scope="norm_layers_only", learning_rate=1e-5)
    return replace(cfg, **overrides) if overrides else cfg


def fine_grained_encoder_config(**overrides) -> EncoderConfig:
    """Fine-grained default: every parameter adapts at a very low rate."""
    cfg = EncoderConfig(trainable_scope="all", learning_rate=1e-6)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class PatchFeatureSet:
    patch_features: torch.Tensor  # (T, d), row-major over the grid
    global_feature: torch.Tensor  # (1, d)
    grid_shape: tuple[int, int]

    def patch_grid(self) -> torch.Tensor:
        gh, gw = self.grid_shape
        return self.patch_features.reshape(gh, gw, -1)


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))
        attn = torch.softmax((q @ k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        patch_dim = 3 * config.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            [_Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(d)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: (B, 3, H, W) in [0, 1] -> (patch (B, T, d), global (B, d))."""
        h, w = self.config.input_size
        if x.shape[-2:] != (h, w):
            raise EncoderError(f"input {tuple(x.shape[-2:])} does not match configured {h}x{w}")
        p = self.config.patch_size
        tokens = rearrange(x, "b c (gh p1) (gw p2) -> b (gh gw) (p1 p2 c)", p1=p, p2=p)
        tokens = self.patch_embed(tokens)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1).to(tokens.dtype)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed.to(tokens.dtype)
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        return tokens[:, 1:, :], tokens[:, 0, :]

    def encode(self, image: np.ndarray | torch.Tensor, mode: str = "both") -> PatchFeatureSet:
        """Encode one H x W x 3 image. ``mode``: global | patchwise | both."""
        if mode not in ("global", "patchwise", "both"):
            raise EncoderError(f"unknown encode mode {mode!r}")
        x = image
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x))
        if x.dim() != 3 or x.shape[-1] != 3:
            raise EncoderError(f"expected HxWx3 image, got {tuple(x.shape)}")
        x = x.permute(2, 0, 1)[None].to(next(self.parameters()).dtype)
        patches, global_feat = self.forward(x)
        return PatchFeatureSet(
            patch_features=patches[0],
            global_feature=global_feat,
            grid_shape=self.config.grid_shape,
        )

    def trainable_parameters(self, scope: str | None = None) -> list[nn.Parameter]:
        scope = scope or self.config.trainable_scope
        if scope not in TRAINABLE_SCOPES:
            raise EncoderError(f"unknown trainable scope {scope!r}")
        if scope == "frozen":
            return []
        if scope == "all":
            return list(self.parameters())
        params: list[nn.Parameter] = []
        for module in self.modules():
            if isinstance(module, nn.LayerNorm):
                params.extend([module.weight, module.bias])
        return params

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        return save_checkpoint(
            path,
            role="encoder",
            config=self.config.to_dict(),
            state_dict=self.state_dict(),
            extra=extra,
        )

    @classmethod
    def from_checkpoint(cls, path: str | Path, config: EncoderConfig | None = None) -> "PatchEncoder":
        payload = load_checkpoint(path, expect_role="encoder")
        if config is None:
            config = EncoderConfig.from_dict(payload["config"])
        require_config_match(config.to_dict(), payload["config"], f"encoder checkpoint {path}")
        model = cls(config)
        model.load_state_dict(payload["state_dict"])
        return model


def load_pretrained_encoder(path: str | Path) -> PatchEncoder:
    """Adapter for externally exported patch-encoder weights.

    Accepts any checkpoint written in the container format with role
    ``encoder``; the returned model serves the regular ``encode`` contract.
    """
    if not Path(path).exists():
        raise CheckpointError(
            f"no pretrained encoder at {path}; train from scratch or point at an exported container"
        )
    return PatchEncoder.from_checkpoint(path)
