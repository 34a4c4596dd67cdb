"""Random resize-and-zero-pad, used at inference after denoising and as a training augmentation."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


def resize_range(side: int, min_fraction: float) -> tuple[int, int]:
    if not 0.0 < min_fraction <= 1.0:
        raise ValueError("min_fraction must lie in (0, 1]")
    return math.ceil(min_fraction * side - 1e-9), side


def resize_pad(x: torch.Tensor, n: int, top: int, left: int) -> torch.Tensor:
    """Bilinearly resize a ``(B, C, S, S)`` batch to ``n x n`` and zero-pad it back at ``(top, left)``."""
    side = x.shape[-1]
    if n == side:
        return x.clone()
    small = F.interpolate(x, size=(n, n), mode="bilinear", align_corners=False)
    return F.pad(small, (left, side - n - left, top, side - n - top))


def random_resize_pad(x: torch.Tensor, min_fraction: float, rng: np.random.Generator) -> torch.Tensor:
    """Per-image random side ``n`` in ``[ceil(min_fraction*S), S]`` and uniform offset."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    side = x.shape[-1]
    lo, hi = resize_range(side, min_fraction)
    out = torch.empty_like(x)
    for b in range(x.shape[0]):
        n = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, side - n + 1))
        left = int(rng.integers(0, side - n + 1))
        out[b] = resize_pad(x[b : b + 1], n, top, left)[0]
    return out[0] if single else out
