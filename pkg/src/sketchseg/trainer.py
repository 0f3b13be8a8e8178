"""End-to-end segmenter training against a frozen critic.

One step: encode photos patch-wise and sketches globally with the shared
encoder, build soft masks from the correlation maps, mask the photos, and
assemble the four-term objective. Partitioned sketch variants produce two
masks that are soft-XOR combined before masking. A decoupled-weight-decay
adaptive step (AdamW) updates only the parameters selected by the trainable
scope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentedSample, augment_batch, xor_combine
from .backbone import EncoderConfig, PatchEncoder
from .checkpoints import load_checkpoint, save_checkpoint
from .data.raster import rasterize
from .data.types import DatasetError, PairedDataset, PhotoRecord, TrainSample
from .losses import (
    INFO_NCE_SCALE,
    LossWeights,
    info_nce,
    mask_reg_loss,
    patch_weighted_feature,
    sbir_loss,
    total_loss,
    unpaired_loss,
)
from .maskgen import cosine_correlation, soft_threshold, upscale
from .sbir import FrozenCritic

REGIMES = ("category", "fine_grained")


class TrainError(RuntimeError):
    pass


class TrainAbort(RuntimeError):
    """Non-recoverable numerical failure inside a training step."""


@dataclass
class TrainConfig:
    regime: str = "category"
    epochs: int = 40
    batch_size: int = 16
    lr: float | None = None  # falls back to the encoder config's rate
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.1
    threshold: float = 0.5
    augment_rate: float = 0.5
    augment_parts: int = 2
    seed: int = 0
    trainable_scope: str | None = None  # falls back to the encoder config
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stroke_width: int = 2
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    checkpoint_every: int = 5
    infonce_scale: float = INFO_NCE_SCALE

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise TrainError(f"unknown regime {self.regime!r}")
        if self.batch_size < 2:
            raise TrainError("batch_size must be >= 2 (contrastive batches)")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.tau <= 0:
            raise TrainError("tau must be positive")

    @property
    def scope(self) -> str:
        return self.trainable_scope or self.encoder.trainable_scope

    @property
    def effective_lr(self) -> float:
        return self.lr if self.lr is not None else self.encoder.learning_rate


@dataclass
class Segmenter:
    """Trained product: the encoder plus its mask-path settings."""

    encoder: PatchEncoder
    tau: float
    threshold: float
    regime: str

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {"tau": self.tau, "threshold": self.threshold, "regime": self.regime}
        meta.update(extra or {})
        return save_checkpoint(
            path,
            role="segmenter",
            config=self.encoder.config.to_dict(),
            state_dict=self.encoder.state_dict(),
            extra=meta,
        )

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Segmenter":
        payload = load_checkpoint(path, expect_role="segmenter")
        config = EncoderConfig.from_dict(payload["config"])
        encoder = PatchEncoder(config)
        encoder.load_state_dict(payload["state_dict"])
        encoder.eval()
        extra = payload["extra"]
        return cls(
            encoder=encoder,
            tau=float(extra.get("tau", 0.1)),
            threshold=float(extra.get("threshold", 0.5)),
            regime=extra.get("regime", "category"),
        )


def sample_negative(
    pair,
    dataset: PairedDataset,
    regime: str,
    seed: int,
    within: set[int] | None = None,
) -> PhotoRecord:
    """Uniform draw over photos that violate the pairing rule for ``pair``."""
    if isinstance(pair, TrainSample):
        anchor_class, anchor_instance = pair.class_id, pair.instance_id
    else:
        anchor_class, anchor_instance = pair[1].class_id, pair[1].instance_id
    pool = dataset.negative_pool(anchor_class, anchor_instance, regime, within=within)
    if not pool:
        raise TrainError(
            f"no eligible negative for anchor class {anchor_class} instance {anchor_instance}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    return dataset.pairs[int(rng.choice(pool))][1]


def _to_batch(images: list[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def build_optimizer(model: PatchEncoder, config: TrainConfig) -> torch.optim.Optimizer | None:
    params = model.trainable_parameters(config.scope)
    if not params:
        return None
    return torch.optim.AdamW(params, lr=config.effective_lr, weight_decay=config.weight_decay)


def compute_batch_losses(
    batch: list[AugmentedSample],
    model: PatchEncoder,
    critic: FrozenCritic,
    config: TrainConfig,
    dataset: PairedDataset,
    neg_seed: int,
    within: set[int] | None = None,
) -> dict[str, torch.Tensor]:
    """All four loss components for one (possibly augmented) batch."""
    hw = tuple(config.encoder.input_size)
    dtype = next(model.parameters()).dtype
    gh, gw = config.encoder.grid_shape

    photos = _to_batch([np.asarray(a.sample.photo_pixels) for a in batch], dtype)
    full_rasters = _to_batch(
        [rasterize(a.sample.sketch, hw, config.stroke_width) for a in batch], dtype
    )
    negatives = [
        sample_negative(a.sample, dataset, config.regime, neg_seed + i, within=within)
        for i, a in enumerate(batch)
    ]
    neg_photos = _to_batch([n.pixels for n in negatives], dtype)

    part_rasters = []
    part_owner = []
    for i, a in enumerate(batch):
        if a.parts is not None:
            for part in a.parts:
                part_rasters.append(rasterize(part, hw, config.stroke_width))
                part_owner.append(i)

    photo_patches, _ = model(photos)
    _, sketch_globals = model(full_rasters)
    neg_patches, _ = model(neg_photos)
    part_globals = None
    if part_rasters:
        _, part_globals = model(_to_batch(part_rasters, dtype))

    masks = []
    p_hats = []
    unpaired_terms = []
    part_cursor = 0
    for i, a in enumerate(batch):
        grid = photo_patches[i].reshape(gh, gw, -1)
        s_full = sketch_globals[i]
        if a.parts is not None:
            part_masks = []
            for _ in a.parts:
                c = cosine_correlation(part_globals[part_cursor], grid)
                part_masks.append(upscale(soft_threshold(c, config.tau, config.threshold), hw))
                part_cursor += 1
            mask = part_masks[0]
            for m in part_masks[1:]:
                mask = xor_combine(mask, m)
        else:
            c = cosine_correlation(s_full, grid)
            mask = upscale(soft_threshold(c, config.tau, config.threshold), hw)
        masks.append(mask)
        p_hats.append(patch_weighted_feature(s_full, photo_patches[i]))
        c_neg = cosine_correlation(s_full, neg_patches[i].reshape(gh, gw, -1))
        unpaired_terms.append(unpaired_loss(soft_threshold(c_neg, config.tau, config.threshold)))

    mask_stack = torch.stack(masks)  # (B, H, W)
    masked_photos = photos * mask_stack[:, None, :, :]

    l_sbir = sbir_loss(masked_photos, full_rasters, critic)
    l_reg = mask_reg_loss(mask_stack)
    l_unpaired = torch.stack(unpaired_terms).mean()
    p_hat = F.normalize(torch.cat(p_hats, dim=0), dim=-1)
    s_norm = F.normalize(sketch_globals, dim=-1)
    l_infonce = info_nce(p_hat, s_norm, scale=config.infonce_scale)

    return {
        "l_infonce": l_infonce,
        "l_sbir": l_sbir,
        "l_unpaired": l_unpaired,
        "l_reg": l_reg,
        "mask_mean": mask_stack.detach().mean(),
    }


def train_step(
    batch: list[TrainSample],
    model: PatchEncoder,
    critic: FrozenCritic,
    config: TrainConfig,
    dataset: PairedDataset,
    optimizer: torch.optim.Optimizer | None = None,
    step_seed: int = 0,
    within: set[int] | None = None,
) -> dict[str, float]:
    """One optimisation step; returns the logged loss components."""
    if critic.regime != config.regime:
        raise TrainError(
            f"critic regime {critic.regime!r} does not match training regime {config.regime!r}"
        )
    augmented = augment_batch(
        batch, rate=config.augment_rate, n=config.augment_parts, seed=step_seed
    )
    parts = compute_batch_losses(
        augmented, model, critic, config, dataset, neg_seed=step_seed * 100003, within=within
    )
    components = (parts["l_infonce"], parts["l_sbir"], parts["l_unpaired"], parts["l_reg"])
    if not all(torch.isfinite(c) for c in components):
        ids = [s.instance_id for s in batch]
        raise TrainAbort(f"non-finite loss component; batch instance ids {ids}")
    total = total_loss(components, config.weights)

    if optimizer is None:
        optimizer = build_optimizer(model, config)
    if optimizer is not None:
        optimizer.zero_grad()
        if total.requires_grad:
            total.backward()
            torch.nn.utils.clip_grad_norm_(
                model.trainable_parameters(config.scope), config.grad_clip
            )
        optimizer.step()

    return {
        "l_infonce": float(parts["l_infonce"].detach()),
        "l_sbir": float(parts["l_sbir"].detach()),
        "l_unpaired": float(parts["l_unpaired"].detach()),
        "l_reg": float(parts["l_reg"].detach()),
        "total": float(total.detach()),
        "mask_mean": float(parts["mask_mean"]),
    }


def _validation_loss(
    samples: list[TrainSample],
    model: PatchEncoder,
    critic: FrozenCritic,
    config: TrainConfig,
    dataset: PairedDataset,
    within: set[int] | None,
) -> float:
    if len(samples) < 2:
        return float("nan")
    losses = []
    plain = replace(config, augment_rate=0.0)
    with torch.no_grad():
        for start in range(0, len(samples) - 1, config.batch_size):
            chunk = samples[start : start + config.batch_size]
            if len(chunk) < 2:
                continue
            wrapped = [AugmentedSample(sample=s) for s in chunk]
            parts = compute_batch_losses(
                wrapped, model, critic, plain, dataset, neg_seed=7_777_777, within=within
            )
            comp = (parts["l_infonce"], parts["l_sbir"], parts["l_unpaired"], parts["l_reg"])
            losses.append(float(total_loss(comp, config.weights)))
    return float(np.mean(losses)) if losses else float("nan")


def fit(
    dataset: PairedDataset,
    config: TrainConfig,
    critic: FrozenCritic | str | Path,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[Segmenter, list[dict]]:
    """Full training run with periodic checkpoints and best-model selection.

    Model selection uses held-out total loss only - ground-truth masks play
    no part anywhere in training or selection.
    """
    if isinstance(critic, (str, Path)):
        if not Path(critic).exists():
            raise TrainError(
                f"critic checkpoint {critic} not found; run `sketchseg train-sbir` first"
            )
        critic = FrozenCritic.from_checkpoint(critic)
    if critic.regime != config.regime:
        raise TrainError(
            f"critic regime {critic.regime!r} does not match configured {config.regime!r}"
        )
    if dataset.association != config.regime:
        raise TrainError(
            f"dataset association {dataset.association!r} does not match regime {config.regime!r}"
        )

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model = PatchEncoder(config.encoder)
    optimizer = build_optimizer(model, config)
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))

    samples = dataset.train_samples()
    if not samples:
        raise TrainError("dataset has no training samples (check sample_split)")
    hw = samples[0].photo_pixels.shape[:2]
    if tuple(hw) != tuple(config.encoder.input_size):
        raise TrainError(
            f"encoder input size {config.encoder.input_size} does not match photos {hw}"
        )

    n_val = int(config.val_fraction * len(samples))
    val_order = rng.permutation(len(samples))
    val_set = [samples[i] for i in val_order[:n_val]]
    train_set = [samples[i] for i in val_order[n_val:]]
    if len(train_set) < config.batch_size:
        raise TrainError("not enough training samples for one batch")
    train_ids = {s.instance_id for s in train_set}

    start_epoch = 0
    best_val = float("inf")
    history: list[dict] = []
    global_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expect_role="segmenter")
        model.load_state_dict(payload["state_dict"])
        extra = payload["extra"]
        if optimizer is not None and extra.get("optimizer_state") is not None:
            optimizer.load_state_dict(extra["optimizer_state"])
        start_epoch = int(extra["epoch"]) + 1
        best_val = float(extra.get("best_val", float("inf")))
        history = list(extra.get("history", []))
        global_step = int(extra.get("global_step", 0))
        torch.set_rng_state(extra["torch_rng"])
        rng.bit_generator.state = extra["np_rng"]

    metrics_path = out_dir / "metrics.jsonl" if out_dir else None
    metrics_file = open(metrics_path, "a") if metrics_path else None

    def checkpoint(epoch: int, tag: str | None = None) -> None:
        if out_dir is None:
            return
        name = tag or f"seg_{config.regime}_{epoch}.ckpt"
        seg = Segmenter(model, tau=config.tau, threshold=config.threshold, regime=config.regime)
        seg.save(
            out_dir / name,
            extra={
                "epoch": epoch,
                "best_val": best_val,
                "history": history,
                "global_step": global_step,
                "optimizer_state": optimizer.state_dict() if optimizer else None,
                "torch_rng": torch.get_rng_state(),
                "np_rng": rng.bit_generator.state,
            },
        )

    try:
        for epoch in range(start_epoch, config.epochs):
            order = rng.permutation(len(train_set))
            epoch_components: list[dict] = []
            for start in range(0, len(order) - 1, config.batch_size):
                idx = order[start : start + config.batch_size]
                if len(idx) < 2:
                    continue
                batch = [train_set[i] for i in idx]
                logged = train_step(
                    batch,
                    model,
                    critic,
                    config,
                    dataset,
                    optimizer=optimizer,
                    step_seed=config.seed * 1_000_003 + global_step,
                    within=train_ids,
                )
                logged["step"] = global_step
                epoch_components.append(logged)
                if metrics_file:
                    metrics_file.write(json.dumps(logged) + "\n")
                global_step += 1

            val = _validation_loss(val_set, model, critic, config, dataset, train_ids)
            record = {
                "epoch": epoch,
                "val_total": val,
                **{
                    k: float(np.mean([c[k] for c in epoch_components]))
                    for k in ("l_infonce", "l_sbir", "l_unpaired", "l_reg", "total", "mask_mean")
                },
            }
            history.append(record)
            if metrics_file:
                metrics_file.flush()
            if not np.isnan(val) and val < best_val:
                best_val = val
                checkpoint(epoch, tag=f"seg_{config.regime}_best.ckpt")
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                checkpoint(epoch)
    finally:
        if metrics_file:
            metrics_file.close()

    if out_dir:
        (out_dir / "history.jsonl").write_text("\n".join(json.dumps(h) for h in history) + "\n")
    model.eval()
    return Segmenter(model, tau=config.tau, threshold=config.threshold, regime=config.regime), history
