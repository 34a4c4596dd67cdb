"""Implicit-feedback datasets, item images, splits and triplet sampling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class InteractionDataset:
    """Binary user-item interactions with dense integer ids.

    ``pairs`` is a sorted, duplicate-free ``(E, 2)`` int64 array of
    ``(user, item)``. ``user_keys``/``item_keys`` map dense ids back to the
    original identifiers when the data was ingested from a file.
    """

    num_users: int
    num_items: int
    pairs: np.ndarray
    user_keys: tuple = ()
    item_keys: tuple = ()
    _positives: tuple = field(default=(), repr=False, compare=False)

    @classmethod
    def from_pairs(cls, num_users, num_items, pairs, user_keys=(), item_keys=()):
        arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if arr.size:
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= num_users:
                raise DataError("user id out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= num_items:
                raise DataError("item id out of range")
        arr = np.unique(arr, axis=0)
        arr.setflags(write=False)
        positives = [[] for _ in range(num_users)]
        for u, i in arr:
            positives[u].append(int(i))
        positives = tuple(np.array(p, dtype=np.int64) for p in positives)
        for p in positives:
            p.setflags(write=False)
        return cls(int(num_users), int(num_items), arr, tuple(user_keys), tuple(item_keys), positives)

    @property
    def num_interactions(self) -> int:
        return len(self.pairs)

    def positives(self, user: int) -> np.ndarray:
        """Sorted item ids the user interacted with."""
        return self._positives[user]

    @property
    def per_user_positives(self) -> dict:
        return {u: frozenset(p.tolist()) for u, p in enumerate(self._positives)}

    def interaction_counts(self) -> np.ndarray:
        return np.array([len(p) for p in self._positives], dtype=np.int64)

    def item_popularity(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 1], minlength=self.num_items)

    def pair_codes(self) -> np.ndarray:
        return self.pairs[:, 0] * self.num_items + self.pairs[:, 1]


@dataclass(frozen=True)
class SplitSpec:
    train: InteractionDataset
    test: dict
    rng_seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.rng_seed, "test": {str(u): int(i) for u, i in sorted(self.test.items())}},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str, full: InteractionDataset) -> "SplitSpec":
        raw = json.loads(text)
        test = {int(u): int(i) for u, i in raw["test"].items()}
        held = {u * full.num_items + i for u, i in test.items()}
        keep = np.array([c not in held for c in full.pair_codes()], dtype=bool)
        train = InteractionDataset.from_pairs(full.num_users, full.num_items, full.pairs[keep],
                                              full.user_keys, full.item_keys)
        return cls(train, test, int(raw["seed"]))


@dataclass
class ImageStore:
    """Item images as an ``(N, C, S, S)`` float32 array with values in [0, 1].

    ``labels`` holds a latent class per item when one is known (synthetic
    data, or an ingested label file).
    """

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise DataError(f"images must be (N, C, S, S), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image values must lie in [0, 1]")

    @property
    def num_items(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_side(self) -> int:
        return self.images.shape[2]

    def save(self, directory, fmt: str = "npy") -> Path:
        """One file per item, ``<item_id>.npy`` (exact float32) or ``<item_id>.png`` (8-bit)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for item, img in enumerate(self.images):
            if fmt == "npy":
                np.save(directory / f"{item}.npy", img)
            elif fmt == "png":
                from PIL import Image

                arr = np.round(np.transpose(img, (1, 2, 0)) * 255.0).astype(np.uint8)
                Image.fromarray(arr.squeeze(-1) if arr.shape[-1] == 1 else arr).save(directory / f"{item}.png")
            else:
                raise DataError(f"unknown image format {fmt!r}")
        return directory

    @classmethod
    def load(cls, directory, num_items: int, labels=None, item_keys=None) -> "ImageStore":
        """Load ``<key>.npy`` or ``<key>.png`` for each item; 8-bit files are scaled by 1/255."""
        directory = Path(directory)
        keys = list(item_keys) if item_keys else [str(i) for i in range(num_items)]
        out = []
        for key in keys:
            npy, png = directory / f"{key}.npy", directory / f"{key}.png"
            if npy.exists():
                img = np.load(npy).astype(np.float32)
            elif png.exists():
                from PIL import Image

                arr = np.asarray(Image.open(png))
                if arr.ndim == 2:
                    arr = arr[..., None]
                img = np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0
            else:
                raise DataError(f"missing image for item {key!r} in {directory}")
            out.append(img)
        return cls(np.stack(out), labels)


@dataclass(frozen=True)
class TripletSample:
    user: int
    pos: int
    neg: int


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 240
    num_items: int = 600
    num_latent_classes: int = 8
    interactions_per_user: int = 12
    image_side: int = 32
    noise_std: float = 0.06
    rng_seed: int = 0
    affinity_concentration: float = 0.3
    contrast: float = 0.5

    def validate(self):
        if self.interactions_per_user < 5:
            raise DataError("interactions_per_user must be >= 5")
        if self.num_latent_classes < 2:
            raise DataError("num_latent_classes must be >= 2")
        if self.num_items < self.num_latent_classes:
            raise DataError("need at least one item per latent class")
        if self.interactions_per_user >= self.num_items:
            raise DataError("interactions_per_user must be below num_items")
        if self.noise_std < 0:
            raise DataError("noise_std must be nonnegative")
        if not 0 < self.contrast <= 1.0:
            raise DataError("contrast must lie in (0, 1]")


def load_interactions(path) -> InteractionDataset:
    """Read a ``user,item,rating`` CSV (optional header); positive ratings become interactions.

    Keys are re-indexed densely in order of first appearance.
    """
    users, items, pairs = {}, {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", rowno)
            ukey, ikey, rating = (c.strip() for c in row)
            try:
                value = float(rating)
            except ValueError:
                if rowno == 1:
                    continue  # header
                raise ParseError(f"rating {rating!r} is not a number", rowno) from None
            if not math.isfinite(value):
                raise ParseError("non-finite rating", rowno)
            if not ukey or not ikey:
                raise ParseError("empty key", rowno)
            if value <= 0:
                continue
            u = users.setdefault(ukey, len(users))
            i = items.setdefault(ikey, len(items))
            pairs.append((u, i))
    if not pairs:
        raise EmptyDatasetError(f"{path}: no interactions")
    return InteractionDataset.from_pairs(len(users), len(items), pairs, tuple(users), tuple(items))


def preprocess(ds: InteractionDataset, min_interactions: int = 5) -> InteractionDataset:
    """Drop users with fewer than ``min_interactions`` positives (single pass) and re-densify user ids.

    Item ids are kept as-is so that the item catalog (and its images) stays aligned.
    """
    counts = ds.interaction_counts()
    keep = np.flatnonzero(counts >= min_interactions)
    if keep.size == 0:
        raise EmptyDatasetError("every user was removed by preprocessing")
    remap = np.full(ds.num_users, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    mask = remap[ds.pairs[:, 0]] >= 0
    pairs = np.stack([remap[ds.pairs[mask, 0]], ds.pairs[mask, 1]], axis=1)
    user_keys = tuple(ds.user_keys[u] for u in keep) if ds.user_keys else ()
    return InteractionDataset.from_pairs(keep.size, ds.num_items, pairs, user_keys, ds.item_keys)


def leave_one_out_split(ds: InteractionDataset, seed: int) -> SplitSpec:
    rng = np.random.default_rng(seed)
    test = {}
    for u in range(ds.num_users):
        pos = ds.positives(u)
        if len(pos) < 2:
            raise DataError(f"user {u} has {len(pos)} interaction(s); leave-one-out needs at least 2")
        test[u] = int(pos[rng.integers(len(pos))])
    held = {u * ds.num_items + i for u, i in test.items()}
    keep = np.array([c not in held for c in ds.pair_codes()], dtype=bool)
    train = InteractionDataset.from_pairs(ds.num_users, ds.num_items, ds.pairs[keep], ds.user_keys, ds.item_keys)
    return SplitSpec(train, test, int(seed))


def _sampleable_users(ds: InteractionDataset) -> np.ndarray:
    counts = ds.interaction_counts()
    users = np.flatnonzero((counts > 0) & (counts < ds.num_items))
    if users.size == 0:
        raise DataError("no user has both positive and negative items")
    return users


def sample_triplet(ds: InteractionDataset, rng: np.random.Generator) -> TripletSample:
    """Draw ``(u, i, j)``: u uniform over users, i uniform over its positives, j uniform over the rest.

    Users without positives or without negatives are skipped by resampling.
    """
    if ds.num_users == 0:
        raise EmptyDatasetError("empty dataset")
    _sampleable_users(ds)
    while True:
        u = int(rng.integers(ds.num_users))
        pos = ds.positives(u)
        if 0 < len(pos) < ds.num_items:
            break
    i = int(pos[rng.integers(len(pos))])
    while True:
        j = int(rng.integers(ds.num_items))
        if not _contains(pos, j):
            return TripletSample(u, i, j)


def sample_triplets(ds: InteractionDataset, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_triplet`; returns an ``(n, 3)`` int64 array."""
    users_ok = _sampleable_users(ds)
    users = users_ok[rng.integers(users_ok.size, size=n)]
    counts = ds.interaction_counts()[users]
    offsets = np.concatenate([[0], np.cumsum(ds.interaction_counts())])
    flat = np.concatenate(ds._positives) if ds.num_interactions else np.zeros(0, np.int64)
    pos = flat[offsets[users] + (rng.random(n) * counts).astype(np.int64)]
    codes = np.sort(ds.pair_codes())
    neg = rng.integers(ds.num_items, size=n)
    bad = _isin_sorted(users * ds.num_items + neg, codes)
    while bad.any():
        neg[bad] = rng.integers(ds.num_items, size=int(bad.sum()))
        bad = _isin_sorted(users * ds.num_items + neg, codes)
    return np.stack([users, pos, neg], axis=1).astype(np.int64)


def _contains(sorted_arr: np.ndarray, value: int) -> bool:
    k = np.searchsorted(sorted_arr, value)
    return k < len(sorted_arr) and sorted_arr[k] == value


def _isin_sorted(values: np.ndarray, sorted_codes: np.ndarray) -> np.ndarray:
    if sorted_codes.size == 0:
        return np.zeros(values.shape, dtype=bool)
    k = np.clip(np.searchsorted(sorted_codes, values), 0, sorted_codes.size - 1)
    return sorted_codes[k] == values


# --- synthetic benchmark -----------------------------------------------------

def _motif(kind: int, side: int) -> np.ndarray:
    """Binary geometric pattern on a ``side x side`` grid."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    base = kind % 10
    freq = 3 + kind // 10
    if base == 0:
        m = np.sin(2 * np.pi * freq * yy) > 0
    elif base == 1:
        m = np.sin(2 * np.pi * freq * xx) > 0
    elif base == 2:
        m = np.sin(2 * np.pi * freq * (xx + yy) / 1.414) > 0
    elif base == 3:
        m = (np.floor(yy * 2 * freq) + np.floor(xx * 2 * freq)) % 2 == 0
    elif base == 4:
        m = (yy - 0.5) ** 2 + (xx - 0.5) ** 2 < 0.09
    elif base == 5:
        m = (np.abs(yy - 0.5) < 0.12) | (np.abs(xx - 0.5) < 0.12)
    elif base == 6:
        r = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)
        m = (r > 0.22) & (r < 0.38)
    elif base == 7:
        d = np.maximum(np.abs(yy - 0.5), np.abs(xx - 0.5))
        m = (d > 0.25) & (d < 0.4)
    elif base == 8:
        m = np.sin(2 * np.pi * freq * (xx - yy) / 1.414) > 0
    else:
        m = (np.abs(yy - xx) < 0.1) | (np.abs(yy + xx - 1.0) < 0.1)
    return m.astype(np.float32)


def class_templates(num_classes: int, side: int, channels: int = 3, seed: int = 0,
                    contrast: float = 0.5) -> np.ndarray:
    """One template per class: a distinct motif painted with class-specific colours.

    Every template is recentred to a per-channel mean of 0.5, so classes differ
    by shape and colour layout rather than by overall brightness. ``contrast``
    scales the deviation from that mean.
    """
    rng = np.random.default_rng([seed, 7])
    out = np.empty((num_classes, channels, side, side), dtype=np.float32)
    for c in range(num_classes):
        fg = rng.uniform(0.55, 0.85, size=channels)
        bg = rng.uniform(0.15, 0.45, size=channels)
        t = bg[:, None, None] + (fg - bg)[:, None, None] * _motif(c, side)[None]
        out[c] = 0.5 + contrast * (t - t.mean(axis=(1, 2), keepdims=True))
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionDataset, ImageStore]:
    """Seeded benchmark in which item images carry the preference signal.

    Each item gets a latent class; its image is the class template plus
    clipped Gaussian pixel noise. Each user draws class affinities from a
    Dirichlet centred on a skewed class popularity, then picks items class by
    class according to those affinities.
    """
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    C = spec.num_latent_classes
    # every class is non-empty; the rest of the catalog is assigned at random
    labels = np.concatenate([np.arange(C), rng.integers(C, size=spec.num_items - C)])
    labels = rng.permutation(labels).astype(np.int64)
    templates = class_templates(C, spec.image_side, seed=spec.rng_seed, contrast=spec.contrast)
    noise = rng.normal(0.0, 1.0, size=(spec.num_items, 3, spec.image_side, spec.image_side)).astype(np.float32)
    images = np.clip(templates[labels] + np.float32(spec.noise_std) * noise, 0.0, 1.0).astype(np.float32)

    popularity = 1.0 / np.arange(1, C + 1) ** 0.7
    popularity = popularity / popularity.sum()
    members = [np.flatnonzero(labels == c) for c in range(C)]
    pairs = []
    for u in range(spec.num_users):
        affinity = rng.dirichlet(spec.affinity_concentration * C * popularity)
        chosen: set = set()
        while len(chosen) < spec.interactions_per_user:
            c = rng.choice(C, p=affinity)
            free = [i for i in members[c] if i not in chosen]
            if not free:
                affinity[c] = 0.0
                if affinity.sum() <= 0:
                    affinity = np.ones(C)
                affinity = affinity / affinity.sum()
                continue
            chosen.add(int(free[rng.integers(len(free))]))
        pairs.extend((u, i) for i in sorted(chosen))
    ds = InteractionDataset.from_pairs(spec.num_users, spec.num_items, pairs)
    return ds, ImageStore(images, labels)
