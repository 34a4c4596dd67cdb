"""Versioned checkpoint container shared by every stage.

A checkpoint is a safetensors file: named float/int arrays plus a string
metadata header. The header carries the format version, the component kind
and a JSON config snapshot, so a checkpoint is self-describing.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

FORMAT_VERSION = "1"


class CheckpointError(RuntimeError):
    pass


def save_container(path, arrays: dict, kind: str, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {}
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        flat[name] = np.ascontiguousarray(value)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": json.dumps(config or {}, sort_keys=True),
    }
    save_file(flat, str(path), metadata=meta)
    return path


def load_container(path, kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(arrays, config)``; raises if the file is missing or of the wrong kind."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="numpy") as fh:
        meta = fh.metadata() or {}
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')!r}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return load_file(str(path)), json.loads(meta.get("config", "{}"))


def save_module(path, module: torch.nn.Module, kind: str, config: dict | None = None) -> Path:
    return save_container(path, dict(module.state_dict()), kind, config)


def load_module_state(module: torch.nn.Module, arrays: dict, prefix: str = "") -> torch.nn.Module:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)
    return module


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
