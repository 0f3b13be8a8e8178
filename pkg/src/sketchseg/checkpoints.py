"""Self-describing checkpoint containers shared by the encoder and critics."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch


class CheckpointError(RuntimeError):
    pass


FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    *,
    role: str,
    config: dict,
    state_dict: dict,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "role": role,
        "config": config,
        "state_dict": {k: v.cpu() for k, v in state_dict.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expect_role: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a sketchseg checkpoint container")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} unsupported (want {FORMAT_VERSION})"
        )
    if expect_role is not None and payload.get("role") != expect_role:
        raise CheckpointError(
            f"checkpoint role {payload.get('role')!r} does not match expected {expect_role!r}"
        )
    return payload


def require_config_match(expected: dict, found: dict, context: str) -> None:
    if expected != found:
        diff = {
            k: (expected.get(k), found.get(k))
            for k in sorted(set(expected) | set(found))
            if expected.get(k) != found.get(k)
        }
        raise CheckpointError(f"{context}: config mismatch {diff}")


def param_checksum(module: torch.nn.Module) -> str:
    """Stable digest over all parameters and buffers; detects any mutation."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
