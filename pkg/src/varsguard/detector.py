"""Contrastive detector of adversarial item images.

An encoder (convolutional backbone + two-layer projection head) is trained so
that an image and its denoised version embed close together when the image is
clean and far apart when it is adversarial. At test time the Euclidean
distance between ``embed(x)`` and ``embed(T(x))`` is compared to a threshold.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import denoise
from .evaluation import roc_curve
from .io import load_container, load_module_state, save_container
from .seeding import seeded
from .vision import FeatureExtractor

# quadruple slots
CLEAN, ADV, CLEAN_DE, ADV_DE = 0, 1, 2, 3
SLOT_NAMES = ("clean", "adv", "clean_de", "adv_de")
POSITIVE_PAIRS = ((CLEAN, CLEAN_DE), (CLEAN, ADV_DE), (CLEAN_DE, ADV_DE))
NEGATIVE_PAIRS = ((ADV, CLEAN), (ADV, ADV_DE), (CLEAN_DE, ADV))

# fixed threshold used when no calibration data is available
FALLBACK_THRESHOLD = 0.2

_NORM_FLOOR = 1e-12


class DetectorError(ValueError):
    pass


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    z_dim: int = 128
    normalize: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise DetectorError("temperature must be positive")
        if self.z_dim < 1:
            raise DetectorError("z_dim must be positive")


class DetectorEncoder(nn.Module):
    """``z = W2 relu(W1 g(x))``, L2-normalised when ``normalize`` is set."""

    def __init__(self, backbone: FeatureExtractor | None = None, hidden: int = 128, z_dim: int = 128,
                 normalize: bool = True, seed: int = 0):
        super().__init__()
        self.backbone = backbone if backbone is not None else FeatureExtractor(seed=seed)
        self.hidden, self.z_dim, self.normalize = hidden, z_dim, normalize
        with seeded(seed + 1):
            self.head = nn.Sequential(nn.Linear(self.backbone.pooled_dim, hidden), nn.ReLU(), nn.Linear(hidden, z_dim))

    def config(self) -> dict:
        return {"backbone": self.backbone.config(), "hidden": self.hidden, "z_dim": self.z_dim,
                "normalize": self.normalize}

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Embedding before normalisation."""
        return self.head(self.backbone(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.project(x)
        if self.normalize:
            norm = z.norm(dim=-1, keepdim=True)
            if (norm < _NORM_FLOOR).any():
                raise DetectorError("zero embedding cannot be normalised")
            z = z / norm
        return z

    def save(self, path, extra: dict | None = None):
        return save_container(path, dict(self.state_dict()), "detector", {**self.config(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["DetectorEncoder", dict]:
        arrays, cfg = load_container(path, "detector")
        b = cfg["backbone"]
        backbone = FeatureExtractor(b["widths"], b["strides"], b["in_channels"], b["image_side"])
        enc = cls(backbone, cfg["hidden"], cfg["z_dim"], cfg["normalize"])
        load_module_state(enc, arrays)
        enc.eval()
        return enc, cfg


@torch.no_grad()
def embed(enc: DetectorEncoder, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Inference-mode embeddings of an image or a batch."""
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    was = enc.training
    enc.eval()
    z = torch.cat([enc(xb[k : k + batch_size]) for k in range(0, len(xb), batch_size)])
    enc.train(was)
    return z[0] if single else z


@dataclass(frozen=True)
class PairSet:
    item: int
    positives: tuple
    negatives: tuple

    def named(self) -> dict:
        return {"positive": [(SLOT_NAMES[a], SLOT_NAMES[b]) for a, b in self.positives],
                "negative": [(SLOT_NAMES[a], SLOT_NAMES[b]) for a, b in self.negatives]}


def build_pairs(quadruples, items=None) -> list[PairSet]:
    """Three positive and three negative slot pairs per ``(clean, adv, clean_de, adv_de)`` quadruple."""
    out = []
    for k, q in enumerate(quadruples):
        if len(q) != 4 or any(e is None for e in q):
            raise DetectorError(f"quadruple {k} is incomplete")
        out.append(PairSet(int(items[k]) if items is not None else k, POSITIVE_PAIRS, NEGATIVE_PAIRS))
    return out


def _pair_similarities(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    z = F.normalize(z, dim=-1)
    pos = torch.stack([(z[:, a] * z[:, b]).sum(-1) for a, b in POSITIVE_PAIRS], 1)
    neg = torch.stack([(z[:, a] * z[:, b]).sum(-1) for a, b in NEGATIVE_PAIRS], 1)
    return pos, neg


def contrastive_loss_from_embeddings(z: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean over items of ``-log(sum_pos exp(s/t) / sum_all exp(s/t))`` with cosine ``s``.

    ``z`` has shape ``(B, 4, Z)`` in quadruple slot order.
    """
    if not temperature > 0:
        raise DetectorError("temperature must be positive")
    if z.dim() != 3 or z.shape[1] != 4:
        raise DetectorError(f"expected (B, 4, Z) embeddings, got {tuple(z.shape)}")
    if z.shape[0] == 0:
        raise DetectorError("no quadruples")
    pos, neg = _pair_similarities(z)
    logits = torch.cat([pos, neg], 1) / temperature
    return (torch.logsumexp(logits, 1) - torch.logsumexp(logits[:, :3], 1)).mean()


def contrastive_loss(enc: DetectorEncoder, quads: torch.Tensor, cfg: ContrastiveConfig) -> torch.Tensor:
    """Contrastive loss of a ``(B, 4, C, S, S)`` batch of quadruples, differentiable in the encoder and images."""
    if not cfg.temperature > 0:
        raise DetectorError("temperature must be positive")
    b = quads.shape[0]
    z = enc(quads.reshape(b * 4, *quads.shape[2:])).reshape(b, 4, -1)
    return contrastive_loss_from_embeddings(z, cfg.temperature)


def dissimilarity(enc: DetectorEncoder, x_in: torch.Tensor, x_out: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between the embeddings; a scalar for single images, a vector for batches."""
    return (embed(enc, x_in) - embed(enc, x_out)).norm(dim=-1)


@dataclass(frozen=True)
class DetectionDecision:
    distance: float
    threshold: float
    verdict: str

    @property
    def adversarial(self) -> bool:
        return self.verdict == "adversarial"


def decide(d: float, threshold: float) -> DetectionDecision:
    if d < 0:
        raise DetectorError("distance must be nonnegative")
    return DetectionDecision(float(d), float(threshold), "adversarial" if d > threshold else "clean")


def calibrate_threshold(distances_clean, distances_adv) -> tuple[float, list]:
    """Threshold maximising ``TPR - FPR`` over the ROC sweep; returns ``(threshold, roc)``.

    Ties go to the largest threshold (the fewest false alarms).
    """
    if len(distances_clean) == 0 or len(distances_adv) == 0:
        raise DetectorError("calibration needs clean and adversarial distances")
    roc = roc_curve(distances_clean, distances_adv)
    j = np.array([tpr - fpr for fpr, tpr, _ in roc])
    return roc[int(np.argmax(j))][2], roc


@dataclass
class DetectorSchedule:
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 16
    rng_seed: int = 0
    noise_fraction: float = 0.0      # share of quadruples whose clean slot carries Gaussian noise
    noise_sigma: float = 64 / 255    # largest noise level drawn for those quadruples

    def to_dict(self) -> dict:
        return asdict(self)


def noisy_copy(x: torch.Tensor, sigma_max: float, rng: np.random.Generator) -> torch.Tensor:
    """Per-image Gaussian noise with ``sigma ~ U(0, sigma_max)``, clipped to [0, 1]."""
    sig = torch.as_tensor(rng.uniform(0.0, sigma_max, size=(len(x), 1, 1, 1)), dtype=x.dtype)
    noise = torch.as_tensor(rng.standard_normal(size=tuple(x.shape)), dtype=x.dtype)
    return (x + sig * noise).clamp(0.0, 1.0)


def train_detector(enc: DetectorEncoder, denoiser, clean: np.ndarray, adversarial: np.ndarray, items,
                   cfg: ContrastiveConfig, schedule: DetectorSchedule, log=None) -> DetectorEncoder:
    """Train the encoder on quadruples built from clean and adversarial catalogs through a frozen denoiser.

    ``clean`` and ``adversarial`` are full ``(N, C, S, S)`` arrays. Every
    quadruple carries one clean and one adversarial source image, so the two
    kinds are balanced by construction.
    """
    if denoiser is None:
        raise DetectorError("train_detector needs a trained denoiser")
    rng = np.random.default_rng([schedule.rng_seed, 4])
    items = np.asarray(items, dtype=np.int64)
    x_clean = torch.as_tensor(clean[items])
    x_adv = torch.as_tensor(adversarial[items])
    if schedule.noise_fraction > 0:
        pick = rng.random(len(items)) < schedule.noise_fraction
        x_clean = x_clean.clone()
        x_clean[pick] = noisy_copy(x_clean[pick], schedule.noise_sigma, rng)
    quads = torch.stack([x_clean, x_adv, denoise(denoiser, x_clean), denoise(denoiser, x_adv)], 1)
    opt = torch.optim.Adam(enc.parameters(), lr=schedule.learning_rate)
    enc.train()
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(items))
        total, n_batches = 0.0, 0
        for b in range(0, len(order), schedule.batch_size):
            loss = contrastive_loss(enc, quads[order[b : b + schedule.batch_size]], cfg)
            if not torch.isfinite(loss):
                raise RuntimeError("non-finite contrastive loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        if log is not None:
            log({"stage": "train_detector", "epoch": epoch, "loss": total / n_batches})
    enc.eval()
    return enc


def detection_distances(enc: DetectorEncoder, denoiser, x: torch.Tensor) -> np.ndarray:
    """``||embed(x) - embed(T(x))||`` per image."""
    return dissimilarity(enc, x, denoise(denoiser, x)).numpy().astype(np.float64)
