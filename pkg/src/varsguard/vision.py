"""Staged CNN feature extractor, perceptual taps and an auxiliary class head.

This is the desk-scale stand-in for the ImageNet ResNet50 used by VBPR: the
pooled output feeds the recommender, the outputs of stages 2-4 feed the
perceptual loss, and a linear head on the pooled features gives the
classifier needed by class-targeted attacks.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import random_resize_pad
from .seeding import seeded


class ShapeError(ValueError):
    pass


class FeatureExtractor(nn.Module):
    def __init__(self, widths=(16, 32, 64, 64), strides=(1, 2, 2, 2), in_channels=3, image_side=32, seed=0):
        super().__init__()
        if len(widths) != 4 or len(strides) != 4:
            raise ValueError("the extractor has exactly four stages")
        self.widths = tuple(int(w) for w in widths)
        self.strides = tuple(int(s) for s in strides)
        self.in_channels = in_channels
        self.image_side = image_side
        stages, prev = [], in_channels
        with seeded(seed):
            for w, s in zip(self.widths, self.strides):
                stages.append(nn.Sequential(
                    nn.Conv2d(prev, w, 3, stride=s, padding=1, bias=False),
                    nn.BatchNorm2d(w),
                    nn.ReLU(),
                ))
                prev = w
        self.stages = nn.ModuleList(stages)
        self.frozen = False

    @property
    def pooled_dim(self) -> int:
        return self.widths[-1]

    tap_names = ("tap2", "tap3", "tap4")

    def config(self) -> dict:
        return {"widths": list(self.widths), "strides": list(self.strides),
                "in_channels": self.in_channels, "image_side": self.image_side}

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[2] != self.image_side or x.shape[3] != self.image_side:
            raise ShapeError(f"expected (B, {self.in_channels}, {self.image_side}, {self.image_side}), got {tuple(x.shape)}")
        return x

    def _run(self, x):
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = self._run(self._check(x))
        return maps[-1].mean(dim=(2, 3))

    def taps(self, x: torch.Tensor):
        maps = self._run(self._check(x))
        return maps[1], maps[2], maps[3]

    def freeze(self) -> "FeatureExtractor":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        # a frozen extractor stays in inference-statistics mode
        return super().train(mode and not getattr(self, "frozen", False))


class ClassifierHead(nn.Module):
    def __init__(self, dim: int, num_classes: int, seed: int = 0):
        super().__init__()
        with seeded(seed):
            self.linear = nn.Linear(dim, num_classes)
        self.num_classes = num_classes

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.linear.in_features:
            raise ShapeError(f"expected feature length {self.linear.in_features}, got {f.shape[-1]}")
        return self.linear(f)


def extract(fe: FeatureExtractor, x: torch.Tensor) -> torch.Tensor:
    """Pooled feature vector(s); a single ``(C, S, S)`` image gives a ``(D,)`` vector."""
    out = fe(x)
    return out[0] if x.dim() == 3 else out


def taps(fe: FeatureExtractor, x: torch.Tensor):
    maps = fe.taps(x)
    return tuple(m[0] for m in maps) if x.dim() == 3 else maps


def classify(head: ClassifierHead, f: torch.Tensor) -> torch.Tensor:
    return F.softmax(head(f), dim=-1)


@torch.no_grad()
def compute_features(fe: FeatureExtractor, images, batch_size: int = 256) -> torch.Tensor:
    """Features for a whole image array, computed in fixed-size chunks in item order."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    was_training = fe.training
    fe.eval()
    out = torch.cat([fe(x[k : k + batch_size]) for k in range(0, len(x), batch_size)])
    fe.train(was_training)
    return out


def pretrain_extractor(fe: FeatureExtractor, images, labels, num_classes: int, epochs: int = 6,
                       lr: float = 3e-3, batch_size: int = 64, seed: int = 0,
                       augment_fraction: float = 0.5, resize_min_fraction: float = 0.875):
    """Supervised pretraining on latent-class labels, then freeze.

    Half of each batch (by default) is passed through random resize-and-pad
    so that the features tolerate the inference-time randomization layer.
    Returns the trained :class:`ClassifierHead`.
    """
    rng = np.random.default_rng(seed)
    head = ClassifierHead(fe.pooled_dim, num_classes, seed=seed)
    x_all = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    opt = torch.optim.Adam(list(fe.parameters()) + list(head.parameters()), lr=lr)
    fe.train()
    head.train()
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        for k in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[k : k + batch_size])
            x = x_all[idx]
            if augment_fraction > 0:
                flip = torch.as_tensor(rng.random(len(idx)) < augment_fraction)
                if flip.any():
                    x = x.clone()
                    x[flip] = random_resize_pad(x[flip], resize_min_fraction, rng)
            loss = F.cross_entropy(head(fe(x)), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    fe.freeze()
    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)
    return head


# --- precomputed-feature table -------------------------------------------------
# layout: b"VGFEAT1\0", uint32 D, uint32 count, then count records of (int64 item_id, float32[D])

_FEAT_MAGIC = b"VGFEAT1\0"


def write_feature_table(path, item_ids, features) -> Path:
    feats = np.asarray(features, dtype="<f4")
    ids = np.asarray(item_ids, dtype="<i8")
    if feats.ndim != 2 or len(ids) != len(feats):
        raise ShapeError("features must be (count, D) aligned with item_ids")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", feats.shape[1], len(ids)))
        rec = np.zeros(len(ids), dtype=[("id", "<i8"), ("f", "<f4", (feats.shape[1],))])
        rec["id"], rec["f"] = ids, feats
        fh.write(rec.tobytes())
    return path


def read_feature_table(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != _FEAT_MAGIC:
            raise ShapeError(f"{path}: not a feature table")
        dim, count = struct.unpack("<II", fh.read(8))
        rec = np.frombuffer(fh.read(), dtype=[("id", "<i8"), ("f", "<f4", (dim,))], count=count)
    return rec["id"].copy(), rec["f"].copy()
