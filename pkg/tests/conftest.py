import numpy as np
import pytest
import torch

from sketchseg.backbone import EncoderConfig, PatchEncoder
from sketchseg.data import GeneratorConfig, generate_shapes_world
from sketchseg.sbir import CriticTrainConfig, train_critic


@pytest.fixture(scope="session")
def tiny_world():
    """Smallest legal corpus: 4 classes x 20 images at 48x48."""
    cfg = GeneratorConfig(num_classes=4, per_class=20, canvas=48, unseen_classes=1)
    return cfg, generate_shapes_world(cfg, seed=11)


@pytest.fixture(scope="session")
def tiny_encoder_cfg():
    return EncoderConfig(
        input_size=(48, 48), patch_size=8, embed_dim=32, depth=2, heads=2,
        trainable_scope="all", learning_rate=3e-4,
    )


@pytest.fixture(scope="session")
def tiny_encoder(tiny_encoder_cfg):
    torch.manual_seed(0)
    return PatchEncoder(tiny_encoder_cfg)


@pytest.fixture(scope="session")
def tiny_critic(tiny_world):
    _, dataset = tiny_world
    critic, stats = train_critic(
        dataset, "category", CriticTrainConfig(epochs=6, batch_size=8, seed=3)
    )
    return critic, stats


def finite_diff(f, x: torch.Tensor, indices=None, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of scalar ``f`` w.r.t. selected entries of x."""
    flat = x.detach().reshape(-1)
    if indices is None:
        indices = range(flat.numel())
    grad = torch.zeros(len(list(indices)), dtype=torch.float64)
    indices = list(indices)
    for out_i, i in enumerate(indices):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
        hi = float(f().detach())
        with torch.no_grad():
            flat[i] = orig - eps
        lo = float(f().detach())
        with torch.no_grad():
            flat[i] = orig
        grad[out_i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    denom = max(float(torch.linalg.vector_norm(b)), 1e-12)
    return float(torch.linalg.vector_norm(a - b)) / denom
