"""Seed helpers: per-stage seeds derived from one master seed, and isolated
weight initialisation that leaves the global torch generator untouched."""
from __future__ import annotations

import contextlib
import hashlib

import torch


def stage_seed(master: int, name: str) -> int:
    """Deterministic 31-bit seed for a named stage."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under ``torch.manual_seed(seed)`` and restore the previous generator state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
