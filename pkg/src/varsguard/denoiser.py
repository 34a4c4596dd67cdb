"""Residual + global-attention denoising network and its training losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .augment import random_resize_pad, resize_range
from .seeding import seeded
from .io import load_container, load_module_state, save_container
from .vision import FeatureExtractor, ShapeError

_LOGIT_CLIP = 1e-3


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.PReLU(width),
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
        )
        # zero scale on the closing norm: the block starts as the identity
        nn.init.zeros_(self.body[4].weight)

    def forward(self, x):
        return x + self.body(x)


class GlobalSelfAttention(nn.Module):
    """Single-head self-attention across all spatial positions, with a residual skip."""

    def __init__(self, width: int, key_dim: int | None = None):
        super().__init__()
        key_dim = key_dim or max(width // 4, 4)
        self.q = nn.Conv2d(width, key_dim, 1)
        self.k = nn.Conv2d(width, key_dim, 1)
        self.v = nn.Conv2d(width, width, 1)
        self.out = nn.Conv2d(width, width, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.scale = key_dim ** -0.5

    def forward(self, x):
        b, c, h, w = x.shape
        q = self.q(x).flatten(2).transpose(1, 2)              # (b, hw, dk)
        k = self.k(x).flatten(2)                              # (b, dk, hw)
        v = self.v(x).flatten(2).transpose(1, 2)              # (b, hw, c)
        attn = torch.softmax(q @ k * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.out(y)


class DenoiserNet(nn.Module):
    """Image-to-image network T: 9x9 entry conv, residual blocks, one attention block,
    trailing 3x3 convs and a 9x9 exit conv; no downsampling.

    The exit predicts a correction in logit space, ``T(x) = sigmoid(logit(x) + r)``,
    so the output stays in [0, 1] and an untrained net is (nearly) the identity.
    """

    def __init__(self, channels: int = 3, width: int = 32, n_res: int = 9, n_trailing: int = 2, seed: int = 0):
        super().__init__()
        self.channels, self.width, self.n_res, self.n_trailing = channels, width, n_res, n_trailing
        with seeded(seed):
            self._build()

    def _build(self):
        channels, width, n_res, n_trailing = self.channels, self.width, self.n_res, self.n_trailing
        self.entry = nn.Sequential(nn.Conv2d(channels, width, 9, padding=4), nn.PReLU(width))
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(n_res)])
        self.attention = GlobalSelfAttention(width)
        trailing = []
        for _ in range(n_trailing):
            trailing += [nn.Conv2d(width, width, 3, padding=1), nn.BatchNorm2d(width), nn.PReLU(width)]
        self.trailing = nn.Sequential(*trailing)
        self.exit = nn.Conv2d(width, channels, 9, padding=4)
        nn.init.zeros_(self.exit.weight)
        nn.init.zeros_(self.exit.bias)

    def config(self) -> dict:
        return {"channels": self.channels, "width": self.width, "n_res": self.n_res, "n_trailing": self.n_trailing}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, S, S), got {tuple(x.shape)}")
        h = self.entry(x)
        h = self.blocks(h)
        h = self.attention(h)
        h = self.trailing(h)
        base = torch.logit(x.clamp(_LOGIT_CLIP, 1 - _LOGIT_CLIP))
        return torch.sigmoid(base + self.exit(h))

    def save(self, path, extra: dict | None = None):
        return save_container(path, dict(self.state_dict()), "denoiser", {**self.config(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["DenoiserNet", dict]:
        arrays, cfg = load_container(path, "denoiser")
        net = cls(**{k: cfg[k] for k in ("channels", "width", "n_res", "n_trailing")})
        load_module_state(net, arrays)
        net.eval()
        return net, cfg


@dataclass
class RandomizationConfig:
    enabled: bool = True
    min_fraction: float = 0.875
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.min_fraction <= 1.0:
            raise ValueError("min_fraction must lie in (0, 1]")

    def side_range(self, side: int) -> tuple[int, int]:
        return resize_range(side, self.min_fraction)


# ratio of the 212..224 range used for full-size (224 px) images
REFERENCE_MIN_FRACTION = 212 / 224


@dataclass
class PerceptualConfig:
    weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.weights) != 3 or min(self.weights) < 0 or max(self.weights) <= 0:
            raise ValueError("need three nonnegative tap weights, at least one positive")


@torch.no_grad()
def denoise(net: DenoiserNet, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Inference-mode denoising of an image or a batch, in fixed-size chunks."""
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    was = net.training
    net.eval()
    out = torch.cat([net(xb[k : k + batch_size]) for k in range(0, len(xb), batch_size)])
    net.train(was)
    return out[0] if single else out


def random_transform(x: torch.Tensor, cfg: RandomizationConfig, rng: np.random.Generator) -> torch.Tensor:
    if not cfg.enabled:
        return x.clone()
    return random_resize_pad(x, cfg.min_fraction, rng)


def _batched(a: torch.Tensor) -> torch.Tensor:
    return a.unsqueeze(0) if a.dim() == 3 else a


def pixel_loss(x_hat: torch.Tensor, x_clean: torch.Tensor) -> torch.Tensor:
    """Squared L2 over all pixels of each image, averaged over the batch."""
    if x_hat.shape != x_clean.shape:
        raise ShapeError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x_clean.shape)}")
    d = _batched(x_hat) - _batched(x_clean)
    return d.pow(2).flatten(1).sum(1).mean()


def perceptual_loss(fe: FeatureExtractor, x_hat: torch.Tensor, x_clean: torch.Tensor,
                    cfg: PerceptualConfig | None = None) -> torch.Tensor:
    """Weighted sum over the three taps of the squared L2 feature-map distance, batch-averaged."""
    if x_hat.shape != x_clean.shape:
        raise ShapeError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x_clean.shape)}")
    cfg = cfg or PerceptualConfig()
    with torch.no_grad():
        target = fe.taps(_batched(x_clean))
    maps = fe.taps(_batched(x_hat))
    total = x_hat.new_zeros(())
    for w, a, b in zip(cfg.weights, maps, target):
        if w:
            total = total + w * (a - b).pow(2).flatten(1).sum(1).mean()
    return total


@dataclass
class DenoiserSchedule:
    phase1_epochs: int = 6
    phase2_epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 16
    alpha: float = 1.0           # perceptual weight
    rng_seed: int = 0
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perceptual"] = list(self.perceptual.weights)
        return d


class MissingCatalogError(RuntimeError):
    pass


def draw_input_kinds(phase: int, n: int, rng: np.random.Generator) -> np.ndarray:
    # phase 1: clean/FGSM; phase 2: clean/FGSM/PGD, one seeded draw per iteration
    return rng.integers(0, 2 if phase == 1 else 3, size=n)


def denoiser_step_loss(net, fe, x_in, x_clean, alpha, perceptual_cfg):
    x_hat = net(x_in)
    loss = pixel_loss(x_hat, x_clean)
    if alpha:
        loss = loss + alpha * perceptual_loss(fe, x_hat, x_clean, perceptual_cfg)
    return loss


def train_denoiser(net: DenoiserNet, fe: FeatureExtractor, clean: np.ndarray, catalogs: dict,
                   items, schedule: DenoiserSchedule, log=None, phases=(1, 2)) -> DenoiserNet:
    """Two-phase training towards the clean image, randomization off.

    ``catalogs`` maps ``"fgsm"``/``"pgd"`` to full ``(N, C, S, S)`` adversarial
    arrays. Phase 1 draws clean or FGSM input per iteration; phase 2 draws
    clean, FGSM or PGD with equal probability. The recommender and extractor
    are not touched.
    """
    if 1 in phases and "fgsm" not in catalogs:
        raise MissingCatalogError("phase 1 needs an FGSM catalog")
    if 2 in phases and ("fgsm" not in catalogs or "pgd" not in catalogs):
        raise MissingCatalogError("phase 2 needs FGSM and PGD catalogs")
    rng = np.random.default_rng([schedule.rng_seed, 3])
    items = np.asarray(items, dtype=np.int64)
    sources = [torch.as_tensor(clean)]
    sources.append(torch.as_tensor(catalogs["fgsm"]) if "fgsm" in catalogs else None)
    sources.append(torch.as_tensor(catalogs["pgd"]) if "pgd" in catalogs else None)
    x_clean_all = sources[0]
    opt = torch.optim.Adam(net.parameters(), lr=schedule.learning_rate)
    net.train()
    for phase in phases:
        epochs = schedule.phase1_epochs if phase == 1 else schedule.phase2_epochs
        for epoch in range(epochs):
            order = rng.permutation(items)
            n_iter = (len(order) + schedule.batch_size - 1) // schedule.batch_size
            kinds = draw_input_kinds(phase, n_iter, rng)
            total = 0.0
            for it in range(n_iter):
                idx = torch.as_tensor(order[it * schedule.batch_size : (it + 1) * schedule.batch_size])
                loss = denoiser_step_loss(net, fe, sources[kinds[it]][idx], x_clean_all[idx],
                                          schedule.alpha, schedule.perceptual)
                if not torch.isfinite(loss):
                    raise RuntimeError("non-finite denoiser loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
            if log is not None:
                log({"stage": "train_denoiser", "phase": phase, "epoch": epoch, "loss": total / n_iter,
                     "kind_counts": np.bincount(kinds, minlength=3).tolist()})
    net.eval()
    return net
