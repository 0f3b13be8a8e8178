"""Training losses and the weighted total objective.

All losses return finite non-negative scalars for valid inputs; the two
log-based penalties clamp their argument at 1 - 1e-6, bounding the worst
case near 13.8.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

CLAMP_EPS = 1e-6
INFO_NCE_SCALE = 1.0 / 0.07  # standard contrastive logit scale


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    """Weights for (InfoNCE, SBIR, unpaired, mask-reg); defaults all 1."""

    infonce: float = 1.0
    sbir: float = 1.0
    unpaired: float = 1.0
    reg: float = 1.0

    def __post_init__(self) -> None:
        for name in ("infonce", "sbir", "unpaired", "reg"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.infonce, self.sbir, self.unpaired, self.reg)


def patch_weighted_feature(s: torch.Tensor, p: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Aggregate patch features by softmaxed cosine similarity to the probe.

    ``s``: (d,) or (1, d); ``p``: (T, d). Returns a convex combination of the
    rows of ``p`` shaped (1, d).
    """
    s = s.reshape(-1)
    s_norm = torch.linalg.vector_norm(s)
    p_norm = torch.linalg.vector_norm(p, dim=-1)
    if s_norm < 1e-12 or (p_norm < 1e-12).any():
        raise LossError("zero-norm input to patch_weighted_feature")
    cos = (p @ s) / (p_norm * s_norm)
    weights = torch.softmax(scale * cos, dim=0)
    return (weights[:, None] * p).sum(dim=0, keepdim=True)


def info_nce(p_hat_batch: torch.Tensor, s_batch: torch.Tensor, scale: float = INFO_NCE_SCALE) -> torch.Tensor:
    """Symmetric InfoNCE over a batch of aligned row pairs.

    Rows are expected unit-norm. Both softmax directions (each photo against
    all sketches and vice versa) are averaged, so the loss is symmetric under
    exchanging the two matrices.
    """
    k = p_hat_batch.shape[0]
    if k < 2:
        raise LossError("InfoNCE needs a batch of at least 2")
    if p_hat_batch.shape != s_batch.shape:
        raise LossError("batch shape mismatch")
    logits = scale * (p_hat_batch @ s_batch.T)  # (k, k); [i, j] = p_i . s_j
    diag = torch.arange(k, device=logits.device)
    row = torch.log_softmax(logits, dim=1)[diag, diag]
    col = torch.log_softmax(logits, dim=0)[diag, diag]
    return -(row + col).sum() / (2 * k)


def sbir_loss(masked_photo: torch.Tensor, sketch: torch.Tensor, critic) -> torch.Tensor:
    """Embedding distance under the frozen critic: ||F(P_mask) - F(S)||_2.

    Gradient reaches ``masked_photo`` (and anything upstream of it); the
    critic's parameters are frozen and receive none.
    """
    emb_photo = critic.embed_tensor(masked_photo, source="photo")
    emb_sketch = critic.embed_tensor(sketch, source="sketch")
    return torch.linalg.vector_norm(emb_photo - emb_sketch, dim=-1).mean()


def unpaired_loss(c_n: torch.Tensor) -> torch.Tensor:
    """Push a non-paired photo's correlation map to all-zero."""
    v = torch.clamp(c_n, min=0.0, max=1.0 - CLAMP_EPS)
    return -torch.log1p(-v).mean()


def mask_reg_loss(mask: torch.Tensor) -> torch.Tensor:
    """Penalise mask mass; zero only for an all-zero mask."""
    v = torch.clamp(mask, min=0.0, max=1.0 - CLAMP_EPS)
    return -torch.log1p(-v).mean()


def total_loss(
    components: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    w: LossWeights,
) -> torch.Tensor:
    names = ("infonce", "sbir", "unpaired", "reg")
    for name, value in zip(names, components):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise LossError(f"non-finite loss component: {name}")
    weights = w.as_tuple()
    return sum(wi * ci for wi, ci in zip(weights, components))
