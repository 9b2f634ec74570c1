"""Versioned checkpoint files.

A checkpoint is a ``torch.save`` dict with a format tag, a kind, the
vocabulary hash it was trained against, a config hash, and named state blobs.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

FORMAT_VERSION = "mocgan-ckpt-1"


class CheckpointError(RuntimeError):
    pass


def state_checksum(module: torch.nn.Module) -> str:
    """Hash of every parameter and buffer, for freezing checks."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, states: dict, vocab_hash: str = "", config_hash: str = "", extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "vocab_hash": vocab_hash,
        "config_hash": config_hash,
        "states": states,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None, vocab_hash: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - any unpickling failure means corruption
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a {FORMAT_VERSION} checkpoint")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path} holds a {payload['kind']!r} checkpoint, expected {kind!r}")
    if vocab_hash is not None and payload["vocab_hash"] and payload["vocab_hash"] != vocab_hash:
        raise CheckpointError(
            f"{path} was trained against vocabulary {payload['vocab_hash']}, current is {vocab_hash}"
        )
    return payload
