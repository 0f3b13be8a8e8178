"""Retrieval critics: trained once, then frozen to score masked photos.

Category regime keeps separate sketch/photo branch weights and trains with
class-level triplets; the fine-grained regime shares one branch and adds an
N-class cross-entropy head over the joint embedding, with same-class
different-instance hard negatives.

Positives are randomly background-darkened during training so that photos
with suppressed backgrounds are in-distribution when the critic later judges
masked photos.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import load_checkpoint, param_checksum, save_checkpoint
from .data.raster import rasterize
from .data.types import DatasetError, PairedDataset

REGIMES = ("category", "fine_grained")


class CriticError(RuntimeError):
    pass


@dataclass
class CriticEmbedding:
    vector: torch.Tensor  # (1, d), unit l2 norm
    source: str  # "sketch" | "photo"


@dataclass
class CriticConfig:
    regime: str = "category"
    embed_dim: int = 64
    width: int = 32
    margin: float = 0.3
    num_classes: int = 0  # fine-grained classification head size; 0 disables

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "embed_dim": self.embed_dim,
            "width": self.width,
            "margin": self.margin,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CriticConfig":
        return cls(**d)


@dataclass
class CriticTrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    darken_prob: float = 0.5
    stroke_width: int = 2


class _ConvBranch(nn.Module):
    def __init__(self, embed_dim: int, width: int):
        super().__init__()
        w = width
        def block(cin, cout):
            return [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GroupNorm(8, cout), nn.ReLU()]
        self.features = nn.Sequential(
            *block(3, w), *block(w, 2 * w), *block(2 * w, 4 * w), *block(4 * w, 4 * w)
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(4 * w, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.pool(self.features(x)).flatten(1)
        return F.normalize(self.head(z), dim=-1)


class CriticModel(nn.Module):
    """Sketch/photo embedding network; branches shared in fine-grained regime."""

    def __init__(self, config: CriticConfig):
        super().__init__()
        if config.regime not in REGIMES:
            raise CriticError(f"unknown regime {config.regime!r}")
        self.config = config
        self.photo_branch = _ConvBranch(config.embed_dim, config.width)
        if config.regime == "category":
            self.sketch_branch = _ConvBranch(config.embed_dim, config.width)
        else:
            self.sketch_branch = self.photo_branch

    def forward(self, x: torch.Tensor, source: str = "photo") -> torch.Tensor:
        if source == "photo":
            return self.photo_branch(x)
        if source == "sketch":
            return self.sketch_branch(x)
        raise CriticError(f"unknown source {source!r}")


def triplet_loss(fs, fp, fn, margin: float) -> torch.Tensor:
    """Hinge on embedding distances: max(0, margin + d(s,p) - d(s,n))."""
    if margin <= 0:
        raise CriticError(f"margin must be positive, got {margin}")
    fs, fp, fn = (e.vector if isinstance(e, CriticEmbedding) else e for e in (fs, fp, fn))
    d_pos = torch.linalg.vector_norm(fs - fp, dim=-1)
    d_neg = torch.linalg.vector_norm(fs - fn, dim=-1)
    return torch.clamp(margin + d_pos - d_neg, min=0.0).mean()


def classification_loss(embedding, class_id, head: nn.Linear) -> torch.Tensor:
    """Cross-entropy of the classification head over the joint embedding."""
    emb = embedding.vector if isinstance(embedding, CriticEmbedding) else embedding
    if emb.dim() == 1:
        emb = emb[None]
    target = torch.as_tensor(class_id, device=emb.device).reshape(-1)
    n_classes = head.out_features
    if (target < 0).any() or (target >= n_classes).any():
        raise CriticError(f"class id out of range [0, {n_classes})")
    return F.cross_entropy(head(emb), target.expand(emb.shape[0]))


class FrozenCritic:
    """Immutable critic; embeddings keep a gradient path to the input image."""

    def __init__(self, model: CriticModel, regime: str):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self.regime = regime

    @property
    def embed_dim(self) -> int:
        return self._model.config.embed_dim

    def embed_tensor(self, x: torch.Tensor, source: str = "photo") -> torch.Tensor:
        """``x``: (B, 3, H, W) or (3, H, W) -> (B, d) unit-norm embeddings."""
        if x.dim() == 3:
            x = x[None]
        dtype = next(self._model.parameters()).dtype
        return self._model(x.to(dtype), source=source)

    def embed(self, image: np.ndarray | torch.Tensor, source: str = "photo") -> CriticEmbedding:
        x = image
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x)).float()
        if x.dim() == 3 and x.shape[-1] == 3:
            x = x.permute(2, 0, 1)
        vec = self.embed_tensor(x, source=source)
        return CriticEmbedding(vector=vec, source=source)

    def checksum(self) -> str:
        return param_checksum(self._model)

    def to_double(self) -> "FrozenCritic":
        self._model.double()
        return self

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {"regime": self.regime}
        meta.update(extra or {})
        return save_checkpoint(
            path,
            role="critic",
            config=self._model.config.to_dict(),
            state_dict=self._model.state_dict(),
            extra=meta,
        )

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "FrozenCritic":
        payload = load_checkpoint(path, expect_role="critic")
        config = CriticConfig.from_dict(payload["config"])
        model = CriticModel(config)
        model.load_state_dict(payload["state_dict"])
        return cls(model, regime=payload["extra"].get("regime", config.regime))


# -- training ----------------------------------------------------------------


def _smooth_blob(rng: np.random.Generator, hw: tuple[int, int]) -> np.ndarray:
    cells = int(rng.integers(3, 6))
    grid = rng.uniform(0.0, 1.0, size=(cells, cells))
    ys = np.linspace(0, cells - 1, hw[0])
    xs = np.linspace(0, cells - 1, hw[1])
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (
        grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + grid[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
        + grid[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
        + grid[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    )


def _warmness(photo: np.ndarray) -> np.ndarray:
    """Soft foreground prior: warm-hue, saturated pixels score near 1."""
    r, g, b = photo[..., 0], photo[..., 1], photo[..., 2]
    warmth = r - 0.5 * (g + b)
    return 1.0 / (1.0 + np.exp(-12.0 * (warmth - 0.08)))


def darken_positive(photo: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomly suppress background-like regions of a positive photo."""
    mode = rng.uniform()
    if mode < 0.5:
        keep = _warmness(photo) ** rng.uniform(0.5, 2.0)
    else:
        blob = _smooth_blob(rng, photo.shape[:2])
        pivot = rng.uniform(0.3, 0.7)
        keep = 1.0 / (1.0 + np.exp(-(blob - pivot) / 0.1))
    keep = np.clip(keep, 0.0, 1.0)
    return (photo * keep[..., None]).astype(np.float32)


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


def retrieval_recall(
    critic: FrozenCritic,
    pairs: list,
    level: str = "class",
    stroke_width: int = 2,
) -> float:
    """Recall@1 of sketch queries against the photo gallery formed by ``pairs``."""
    if not pairs:
        raise DatasetError("no pairs to evaluate recall on")
    hw = pairs[0][1].pixels.shape[:2]
    with torch.no_grad():
        photo_emb = critic.embed_tensor(_to_batch([p.pixels for _, p in pairs]), source="photo")
        sketch_emb = critic.embed_tensor(
            _to_batch([rasterize(s, hw, stroke_width) for s, _ in pairs]), source="sketch"
        )
    dists = torch.cdist(sketch_emb, photo_emb)
    nearest = dists.argmin(dim=1).numpy()
    hits = 0
    for qi, pi in enumerate(nearest):
        if level == "class":
            hits += pairs[qi][1].class_id == pairs[pi][1].class_id
        else:
            hits += pairs[qi][1].instance_id == pairs[pi][1].instance_id
    return hits / len(pairs)


def train_critic(
    dataset: PairedDataset,
    regime: str,
    config: CriticTrainConfig | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[FrozenCritic, dict]:
    """Train, evaluate held-out recall@1, freeze, and optionally checkpoint."""
    config = config or CriticTrainConfig()
    if regime not in REGIMES:
        raise CriticError(f"unknown regime {regime!r}")
    if regime != dataset.association:
        raise CriticError(
            f"regime {regime!r} does not match dataset association {dataset.association!r}"
        )

    torch.manual_seed(config.seed)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    n_classes = len({p.class_id for _, p in dataset.pairs})
    model_cfg = CriticConfig(
        regime=regime, num_classes=n_classes if regime == "fine_grained" else 0
    )
    model = CriticModel(model_cfg)
    head = nn.Linear(model_cfg.embed_dim, n_classes) if regime == "fine_grained" else None
    params = list(model.parameters()) + (list(head.parameters()) if head else [])
    optim = torch.optim.Adam(params, lr=config.lr)

    train_ids = set(dataset.sample_split[0])
    train_idx = [i for i, (_, p) in enumerate(dataset.pairs) if p.instance_id in train_ids]
    if len(train_idx) < config.batch_size:
        raise CriticError("not enough training pairs for one batch")
    hw = dataset.pairs[0][1].pixels.shape[:2]
    raster_cache: dict[int, np.ndarray] = {}

    def raster_of(idx: int) -> np.ndarray:
        if idx not in raster_cache:
            raster_cache[idx] = rasterize(dataset.pairs[idx][0], hw, config.stroke_width)
        return raster_cache[idx]

    model.train()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            batch = order[start : start + config.batch_size]
            sketches, positives, negatives, labels = [], [], [], []
            for idx in batch:
                sketch, photo = dataset.pairs[idx]
                sketches.append(raster_of(idx))
                if dataset.association == "category":
                    pool = [
                        j for j, (_, q) in enumerate(dataset.pairs)
                        if q.class_id == photo.class_id and q.instance_id in train_ids
                    ]
                    pos = dataset.pairs[int(rng.choice(pool))][1].pixels
                else:
                    pos = photo.pixels
                if rng.uniform() < config.darken_prob:
                    pos = darken_positive(pos, rng)
                positives.append(pos)
                neg_pool = dataset.negative_pool(
                    photo.class_id, photo.instance_id, regime, within=train_ids
                )
                if not neg_pool:
                    raise CriticError(f"no eligible negative for instance {photo.instance_id}")
                negatives.append(dataset.pairs[int(rng.choice(neg_pool))][1].pixels)
                labels.append(photo.class_id)

            fs = model(_to_batch(sketches), source="sketch")
            fp = model(_to_batch(positives), source="photo")
            fn = model(_to_batch(negatives), source="photo")
            loss = triplet_loss(fs, fp, fn, model_cfg.margin)
            if head is not None:
                target = torch.tensor(labels)
                loss = loss + F.cross_entropy(head(fs), target) + F.cross_entropy(head(fp), target)
            optim.zero_grad()
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach())
            steps += 1
        history.append(epoch_loss / max(steps, 1))

    critic = FrozenCritic(model, regime=regime)
    held_out = dataset.eval_pairs("seen_test") or dataset.eval_pairs("all")
    level = "class" if regime == "category" else "instance"
    recall = retrieval_recall(critic, held_out, level=level, stroke_width=config.stroke_width)
    stats = {
        "recall_at_1": recall,
        "recall_level": level,
        "held_out_pairs": len(held_out),
        "loss_history": history,
    }
    if checkpoint_path is not None:
        critic.save(checkpoint_path, extra={"recall_at_1": recall})
    return critic, stats
