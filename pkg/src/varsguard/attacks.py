"""Gradient-sign attacks on item images (FGSM, PGD) and targeted variants.

Budgets are given in 8-bit units and applied as ``eps / 255`` on [0, 1]
images. Every output satisfies ``||x* - x||_inf <= eps/255`` and
``x* in [0, 1]``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageStore, InteractionDataset
from .recsys import VBPR, bpr_terms
from .vision import ClassifierHead, FeatureExtractor

METHODS = ("fgsm", "pgd", "insa", "expa", "taamr")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 16.0
    steps: int | None = None
    step_size: float | None = None
    target: int | None = None
    rng_seed: int = 0
    n_triplets: int = 8
    roles: str = "positive"     # per-item triplet rule, see item_triplets
    mode: str = "linf"          # "linf" hard constraint, or "l2penalty" (adds -w*||x*-x||^2 to the objective)
    penalty_weight: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps is None:
            self.steps = 1 if self.method == "fgsm" else 10
        if self.step_size is None:
            self.step_size = self.epsilon if self.method == "fgsm" else self.epsilon / 4
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method == "pgd" and self.step_size > self.epsilon + 1e-12:
            raise ValueError("pgd step_size must not exceed epsilon")
        if self.mode not in ("linf", "l2penalty"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialBatch:
    item_ids: np.ndarray
    clean: np.ndarray
    perturbed: np.ndarray
    config: AttackConfig
    achieved_linf: np.ndarray
    metadata: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            **self.config.to_dict(),
            "items": [int(i) for i in self.item_ids],
            "achieved_linf": {str(int(i)): float(v) for i, v in zip(self.item_ids, self.achieved_linf)},
            **self.metadata,
        }

    def save(self, directory) -> Path:
        """Perturbed images in the image-store layout plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for item, img in zip(self.item_ids, self.perturbed):
            np.save(directory / f"{int(item)}.npy", img.astype(np.float32))
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), sort_keys=True, indent=1))
        return directory

    @classmethod
    def load(cls, directory, clean_images: np.ndarray) -> "AdversarialBatch":
        directory = Path(directory)
        man = json.loads((directory / "manifest.json").read_text())
        items = np.array(man["items"], dtype=np.int64)
        pert = np.stack([np.load(directory / f"{i}.npy") for i in items]) if len(items) else clean_images[:0]
        keys = {f for f in AttackConfig.__dataclass_fields__}
        cfg = AttackConfig(**{k: man[k] for k in keys if k in man})
        linf = np.array([man["achieved_linf"][str(i)] for i in items], dtype=np.float64)
        meta = {k: v for k, v in man.items() if k not in keys and k not in ("items", "achieved_linf")}
        return cls(items, clean_images[items], pert, cfg, linf, meta)

    def full_catalog(self, clean_images: np.ndarray) -> np.ndarray:
        """Clean catalog with the attacked items replaced by their perturbed images."""
        out = np.array(clean_images, copy=True)
        out[self.item_ids] = self.perturbed
        return out


def _grad(objective: Callable, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    with torch.enable_grad():
        x = x.detach().clone().requires_grad_(True)
        value = objective(x)
        (g,) = torch.autograd.grad(value, x)
    if not torch.isfinite(g).all():
        raise AttackError("non-finite gradient")
    return value.detach(), g


def fgsm(objective: Callable, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """One ascent step ``clamp(x + eps/255 * sign(grad), 0, 1)``; ``sign(0) = 0``."""
    x = x.detach()
    if epsilon == 0:
        return x.clone()
    _, g = _grad(objective, x)
    return (x + (epsilon / 255.0) * g.sign()).clamp(0.0, 1.0)


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    radius = epsilon / 255.0
    return torch.min(torch.max(x_adv, x - radius), x + radius).clamp(0.0, 1.0)


def pgd(objective: Callable, x: torch.Tensor, cfg: AttackConfig, descend: bool = False,
        history: list | None = None) -> torch.Tensor:
    """Iterated sign steps of size ``step_size/255``, projected onto the eps-ball and [0, 1] after each.

    Ascends ``objective`` (or descends it with ``descend=True``). No random start.
    """
    x = x.detach()
    if cfg.epsilon == 0:
        return x.clone()
    direction = -1.0 if descend else 1.0
    if cfg.mode == "l2penalty" and cfg.penalty_weight > 0:
        def obj(z):
            return objective(z) - direction * cfg.penalty_weight * (z - x).pow(2).sum()
    else:
        obj = objective
    step = cfg.step_size / 255.0
    adv = x.clone()
    for _ in range(cfg.steps):
        value, g = _grad(obj, adv)
        if history is not None:
            history.append(float(value))
        adv = project_linf(adv + direction * step * g.sign(), x, cfg.epsilon)
    if history is not None:
        with torch.no_grad():
            history.append(float(obj(adv)))
    return adv


def _run(objective, x, cfg: AttackConfig, descend: bool = False) -> torch.Tensor:
    if cfg.steps == 1 and cfg.step_size == cfg.epsilon and cfg.mode == "linf":
        out = fgsm((lambda z: -objective(z)) if descend else objective, x, cfg.epsilon)
    else:
        out = pgd(objective, x, cfg, descend=descend)
    return out.detach()


# --- untargeted (BPR) -------------------------------------------------------------

def untargeted_attack_loss(model: VBPR, fe: FeatureExtractor, users, pos, neg,
                           x_pos: torch.Tensor, x_neg: torch.Tensor) -> torch.Tensor:
    """BPR loss of a triplet batch evaluated through image -> feature -> score (no regulariser)."""
    users, pos, neg = (torch.as_tensor(a, dtype=torch.long) for a in (users, pos, neg))
    return bpr_terms(model, users, pos, neg, fe(x_pos), fe(x_neg)).sum()


def item_triplets(train: InteractionDataset, item: int, n: int, rng: np.random.Generator,
                  item_users: np.ndarray, roles: str = "positive") -> tuple[np.ndarray, int]:
    """``n`` training triplets containing ``item``; returns ``(triplets, n_positive_role)``.

    ``roles="positive"`` uses triplets where the item is the preferred one
    (its own users); ``"alternate"`` interleaves positive and negative roles.
    Items nobody interacted with fall back to negative-role triplets of random users.
    """
    if roles not in ("positive", "alternate"):
        raise ValueError(f"unknown role rule {roles!r}")
    out, n_pos = [], 0
    others = np.setdiff1d(np.arange(train.num_users), item_users, assume_unique=True)
    for k in range(n):
        use_pos = len(item_users) > 0 and (roles == "positive" or k % 2 == 0)
        if use_pos:
            u = int(item_users[rng.integers(len(item_users))])
            positives = train.positives(u)
            while True:
                j = int(rng.integers(train.num_items))
                if j not in positives:
                    break
            out.append((u, item, j))
            n_pos += 1
        else:
            pool = others if len(others) else np.arange(train.num_users)
            for _ in range(100):
                u = int(pool[rng.integers(len(pool))])
                positives = train.positives(u)
                if len(positives):
                    break
            else:
                raise AttackError(f"no user with positives available to attack item {item}")
            i = int(positives[rng.integers(len(positives))])
            out.append((u, i, item))
    return np.array(out, dtype=np.int64), n_pos


def attack_catalog(model: VBPR, fe: FeatureExtractor, train: InteractionDataset, images: ImageStore,
                   cfg: AttackConfig, items=None, chunk: int = 128, jobs: int = 1) -> AdversarialBatch:
    """Untargeted FGSM/PGD on every requested item image.

    Each item maximises the BPR loss of ``cfg.n_triplets`` triplets chosen by
    ``item_triplets`` (by default the item is the preferred one); the other item keeps
    its clean features. Triplets come from a generator seeded by
    ``(cfg.rng_seed, item)``.
    """
    if cfg.method not in ("fgsm", "pgd"):
        raise ValueError("attack_catalog handles the untargeted methods fgsm and pgd")
    items = np.arange(images.num_items) if items is None else np.asarray(items, dtype=np.int64)
    clean_all = torch.as_tensor(images.images)
    with torch.no_grad():
        clean_feats = torch.cat([fe(clean_all[k : k + 256]) for k in range(0, len(clean_all), 256)])
    users_of = [[] for _ in range(train.num_items)]
    for u, i in train.pairs:
        users_of[i].append(u)
    users_of = [np.array(v, dtype=np.int64) for v in users_of]

    trips, roles, fallback = [], [], []
    for item in items:
        rng = np.random.default_rng([cfg.rng_seed, int(item)])
        t, n_pos = item_triplets(train, int(item), cfg.n_triplets, rng, users_of[item], cfg.roles)
        trips.append(t)
        roles.append(n_pos)
        if n_pos == 0:
            fallback.append(int(item))

    def run_chunk(c0):
        sel = items[c0 : c0 + chunk]
        t = torch.as_tensor(np.stack(trips[c0 : c0 + chunk]))          # (b, n, 3)
        b, n = t.shape[:2]
        owner = torch.arange(b).repeat_interleave(n)
        flat = t.reshape(-1, 3)
        is_pos = flat[:, 1] == torch.as_tensor(sel).repeat_interleave(n)

        def objective(x):
            f_adv = fe(x)[owner]
            f_pos = torch.where(is_pos[:, None], f_adv, clean_feats[flat[:, 1]])
            f_neg = torch.where(is_pos[:, None], clean_feats[flat[:, 2]], f_adv)
            return bpr_terms(model, flat[:, 0], flat[:, 1], flat[:, 2], f_pos, f_neg).sum()

        return _run(objective, clean_all[sel], cfg).numpy()

    starts = list(range(0, len(items), chunk))
    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run_chunk, starts))    # map keeps chunk order
    else:
        parts = [run_chunk(c0) for c0 in starts]
    out = np.concatenate(parts) if parts else np.empty((0,) + images.images.shape[1:], dtype=np.float32)
    linf = np.abs(out - images.images[items]).reshape(len(items), -1).max(axis=1) if len(items) else np.zeros(0)
    meta = {"positive_role_triplets": {str(int(i)): int(r) for i, r in zip(items, roles)},
            "fallback_items": fallback}
    return AdversarialBatch(items, images.images[items], out, cfg, linf, meta)


# --- targeted -----------------------------------------------------------------------

def insa_attack(model: VBPR, fe: FeatureExtractor, x: torch.Tensor, cfg: AttackConfig, items) -> torch.Tensor:
    """Raise the mean score over all users of each target item (insider access to user factors)."""
    items = torch.as_tensor(np.atleast_1d(items), dtype=torch.long)
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    mean_user = model.gamma_u.detach().mean(0)

    def objective(z):
        f = fe(z)
        return ((model.gamma_i[items].detach() + f @ model.E.detach().T) @ mean_user).sum()

    out = _run(objective, xb, cfg)
    return out[0] if single else out


def expa_attack(fe: FeatureExtractor, x: torch.Tensor, hook_feature: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """Pull the image's features towards those of a popular hook item."""
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    hook = hook_feature.detach()

    def objective(z):
        return (fe(z) - hook).pow(2).sum()

    out = _run(objective, xb, cfg, descend=True)
    return out[0] if single else out


def taamr_attack(fe: FeatureExtractor, head: ClassifierHead, x: torch.Tensor, target_class: int,
                 cfg: AttackConfig) -> torch.Tensor:
    """Push the classifier towards ``target_class`` (cross-entropy descent)."""
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    target = torch.full((xb.shape[0],), int(target_class), dtype=torch.long)

    def objective(z):
        return F.cross_entropy(head(fe(z)), target, reduction="sum")

    out = _run(objective, xb, cfg, descend=True)
    return out[0] if single else out


def linf_distance(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).reshape(len(a), -1).max(axis=1)
