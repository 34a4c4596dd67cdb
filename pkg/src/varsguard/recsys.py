"""VBPR-style scorer, BPR training and the AMR adversarial-training baseline."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import InteractionDataset, sample_triplets
from .io import load_container, load_module_state, save_container


class TrainingDivergedError(RuntimeError):
    pass


class VBPR(nn.Module):
    """Scores ``r_ui = gamma_u . (gamma_i + E f_i)``."""

    def __init__(self, num_users: int, num_items: int, k: int = 16, d: int = 64, lam: float = 1e-4, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.gamma_u = nn.Parameter(0.1 * torch.randn(num_users, k, generator=gen))
        self.gamma_i = nn.Parameter(0.1 * torch.randn(num_items, k, generator=gen))
        self.E = nn.Parameter(0.01 * torch.randn(k, d, generator=gen))
        self.lam = float(lam)

    @property
    def num_users(self) -> int:
        return self.gamma_u.shape[0]

    @property
    def num_items(self) -> int:
        return self.gamma_i.shape[0]

    @property
    def K(self) -> int:
        return self.gamma_u.shape[1]

    @property
    def D(self) -> int:
        return self.E.shape[1]

    def config(self) -> dict:
        return {"num_users": self.num_users, "num_items": self.num_items, "k": self.K, "d": self.D, "lam": self.lam}

    def forward(self, users, items, feats: torch.Tensor) -> torch.Tensor:
        """Batched scores; ``feats`` is ``(B, D)`` aligned with ``users``/``items``."""
        return (self.gamma_u[users] * (self.gamma_i[items] + feats @ self.E.T)).sum(-1)

    def score_matrix(self, features: torch.Tensor) -> torch.Tensor:
        """All ``(M, N)`` scores given an ``(N, D)`` feature table."""
        return self.gamma_u @ (self.gamma_i + features @ self.E.T).T

    def reg(self) -> torch.Tensor:
        return self.gamma_u.pow(2).sum() + self.gamma_i.pow(2).sum() + self.E.pow(2).sum()

    def freeze(self) -> "VBPR":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def save(self, path, extra: dict | None = None):
        return save_container(path, dict(self.state_dict()), "vbpr", {**self.config(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "VBPR":
        arrays, cfg = load_container(path, "vbpr")
        model = cls(cfg["num_users"], cfg["num_items"], cfg["k"], cfg["d"], cfg["lam"])
        return load_module_state(model, arrays)


def score(model: VBPR, u: int, i: int, f_i: torch.Tensor) -> torch.Tensor:
    if not (0 <= u < model.num_users and 0 <= i < model.num_items):
        raise IndexError(f"(user={u}, item={i}) out of range")
    if f_i.shape[-1] != model.D:
        raise ValueError(f"feature length {f_i.shape[-1]} != {model.D}")
    return model.gamma_u[u] @ (model.gamma_i[i] + model.E @ f_i)


def bpr_terms(model: VBPR, users, pos, neg, f_pos: torch.Tensor, f_neg: torch.Tensor) -> torch.Tensor:
    """Per-triplet ``-ln sigmoid(r_ui - r_uj)`` (no regularisation)."""
    diff = model(users, pos, f_pos) - model(users, neg, f_neg)
    return -F.logsigmoid(diff)


def bpr_loss(model: VBPR, users, pos, neg, features: torch.Tensor | None = None,
             f_pos: torch.Tensor | None = None, f_neg: torch.Tensor | None = None,
             lam: float | None = None) -> torch.Tensor:
    """``-sum ln sigmoid(r_ui - r_uj) + lam * ||Theta||^2`` over a batch of triplets.

    Features come either from an ``(N, D)`` table indexed by item, or
    explicitly per triplet via ``f_pos``/``f_neg``.
    """
    users, pos, neg = (torch.as_tensor(a, dtype=torch.long) for a in (users, pos, neg))
    if users.numel() == 0:
        raise ValueError("empty triplet batch")
    if f_pos is None:
        f_pos = features[pos]
    if f_neg is None:
        f_neg = features[neg]
    lam = model.lam if lam is None else lam
    return bpr_terms(model, users, pos, neg, f_pos, f_neg).sum() + lam * model.reg()


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    decay_at: float = 0.8          # fraction of epochs after which the rate drops
    decay_factor: float = 0.1
    batch_size: int = 64
    lam: float = 1e-4
    rng_seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * (self.decay_factor if epoch >= int(round(self.decay_at * self.epochs)) else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_finite(loss: torch.Tensor, lr: float):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()} at learning rate {lr}; lower the learning rate")


def train_bpr(train: InteractionDataset, features: torch.Tensor, cfg: TrainConfig,
              init: VBPR | None = None, k: int = 16, log=None) -> VBPR:
    """Plain SGD on the BPR loss with a step learning-rate schedule.

    Features are precomputed by a frozen extractor. One epoch draws as many
    triplets as there are training interactions.
    """
    features = torch.as_tensor(features, dtype=torch.float32)
    model = init if init is not None else VBPR(train.num_users, train.num_items, k, features.shape[1],
                                               cfg.lam, seed=cfg.rng_seed)
    model.lam = cfg.lam
    rng = np.random.default_rng([cfg.rng_seed, 1])
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        opt = torch.optim.SGD(model.parameters(), lr=lr)
        trip = sample_triplets(train, train.num_interactions, rng)
        total = 0.0
        for b in range(0, len(trip), cfg.batch_size):
            t = torch.as_tensor(trip[b : b + cfg.batch_size])
            loss = bpr_loss(model, t[:, 0], t[:, 1], t[:, 2], features)
            _check_finite(loss, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        if log is not None:
            log({"stage": "train_bpr", "epoch": epoch, "loss": total})
    return model


def amr_train(model: VBPR, train: InteractionDataset, features: torch.Tensor, cfg: TrainConfig,
              eps_feat: float = 0.05, adv_weight: float = 1.0, log=None) -> VBPR:
    """AMR fine-tuning: BPR plus BPR under a worst-case sign perturbation of the item features.

    The perturbation is ``eps_feat * sign(grad_f L_BPR)`` per triplet. With
    ``eps_feat == 0`` the adversarial term coincides with the clean one and is
    dropped, so the procedure is exactly continued BPR training.
    """
    features = torch.as_tensor(features, dtype=torch.float32)
    model.lam = cfg.lam
    rng = np.random.default_rng([cfg.rng_seed, 2])
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        opt = torch.optim.SGD(model.parameters(), lr=lr)
        trip = sample_triplets(train, train.num_interactions, rng)
        total = 0.0
        for b in range(0, len(trip), cfg.batch_size):
            t = torch.as_tensor(trip[b : b + cfg.batch_size])
            u, i, j = t[:, 0], t[:, 1], t[:, 2]
            loss = bpr_loss(model, u, i, j, features)
            if eps_feat > 0:
                adv = amr_adversarial_term(model, u, i, j, features, eps_feat)
                loss = loss + adv_weight * adv
            _check_finite(loss, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        if log is not None:
            log({"stage": "amr_train", "epoch": epoch, "loss": total})
    return model


def amr_adversarial_term(model: VBPR, u, i, j, features, eps_feat: float) -> torch.Tensor:
    """BPR loss (without regularisation) at the sign-perturbed features; always >= 0."""
    f_i = features[i].clone().requires_grad_(True)
    f_j = features[j].clone().requires_grad_(True)
    clean = bpr_terms(model, u, i, j, f_i, f_j).sum()
    g_i, g_j = torch.autograd.grad(clean, (f_i, f_j))
    d_i, d_j = eps_feat * g_i.sign(), eps_feat * g_j.sign()
    return bpr_terms(model, u, i, j, features[i] + d_i, features[j] + d_j).sum()


def parameter_norm(model: VBPR) -> float:
    return math.sqrt(model.reg().item())
