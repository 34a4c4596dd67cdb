"""Ranking metrics under the sampled-negatives protocol, prediction shift,
detection metrics and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionDataset


class MetricError(ValueError):
    pass


@dataclass
class RankingEvalConfig:
    ns: tuple = (5, 10, 20)
    negatives_per_user: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        self.ns = tuple(int(n) for n in self.ns)
        if min(self.ns) <= 0:
            raise ValueError("N values must be positive")
        if self.negatives_per_user < max(self.ns):
            raise ValueError("negatives_per_user must be >= max(N)")


def sample_candidates(full: InteractionDataset, test: dict, cfg: RankingEvalConfig) -> np.ndarray:
    """Per test user: ground-truth item in column 0, then ``negatives_per_user`` distinct
    items the user never interacted with (train or test). Rows follow sorted user id."""
    users = sorted(test)
    out = np.empty((len(users), cfg.negatives_per_user + 1), dtype=np.int64)
    for r, u in enumerate(users):
        rng = np.random.default_rng([cfg.rng_seed, u])
        seen = set(full.positives(u).tolist()) | {test[u]}
        pool = np.array([i for i in range(full.num_items) if i not in seen], dtype=np.int64)
        if len(pool) < cfg.negatives_per_user:
            raise MetricError(f"user {u} has only {len(pool)} non-interacted items")
        out[r, 0] = test[u]
        out[r, 1:] = rng.choice(pool, size=cfg.negatives_per_user, replace=False)
    return out


def rank_of_groundtruth(scores: np.ndarray, candidates: np.ndarray, groundtruth: int) -> int:
    """1-based rank of ``groundtruth`` among ``candidates`` (higher score first, ties by ascending id)."""
    candidates = np.asarray(candidates)
    if groundtruth not in candidates:
        raise MetricError("ground truth missing from candidate set")
    s = np.asarray(scores, dtype=np.float64)
    k = int(np.flatnonzero(candidates == groundtruth)[0])
    better = (s > s[k]) | ((s == s[k]) & (candidates < groundtruth))
    return int(better.sum()) + 1


def hr_at_n(rank: int, n: int) -> float:
    return 1.0 if rank <= n else 0.0


def ndcg_at_n(rank: int, n: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= n else 0.0


def groundtruth_ranks(score_matrix: np.ndarray, candidates: np.ndarray, users) -> np.ndarray:
    """Vectorised ranks; ``score_matrix`` is ``(M, N)``, ``candidates`` rows align with ``users``."""
    s = np.asarray(score_matrix, dtype=np.float64)[np.asarray(users)[:, None], candidates]
    gt_s = s[:, :1]
    better = (s > gt_s) | ((s == gt_s) & (candidates < candidates[:, :1]))
    return better.sum(1) + 1


def ranking_metrics(score_matrix, candidates: np.ndarray, users, ns=(5, 10, 20)) -> dict:
    ranks = groundtruth_ranks(score_matrix, candidates, users)
    out = {}
    for n in ns:
        out[f"HR@{n}"] = float(np.mean(ranks <= n))
        out[f"NDCG@{n}"] = float(np.mean(np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)))
    return out


@dataclass
class ShiftReport:
    per_item: dict
    delta_set: float
    pre_scores: np.ndarray | None = field(default=None, repr=False)
    post_scores: np.ndarray | None = field(default=None, repr=False)


def prediction_shift(pre_scores, post_scores, test_items) -> ShiftReport:
    """Mean over users of ``post - pre`` per item, then mean over the test items.

    Score tables are ``(M, N)`` arrays (rows users) or ``(M, len(test_items))``
    already restricted to the test items. Scores are not rescaled.
    """
    pre, post = np.asarray(pre_scores, dtype=np.float64), np.asarray(post_scores, dtype=np.float64)
    if pre.shape != post.shape:
        raise MetricError(f"misaligned score tables {pre.shape} vs {post.shape}")
    items = list(test_items)
    if not items:
        raise MetricError("empty test item set")
    cols = items if pre.shape[1] != len(items) else list(range(len(items)))
    per = {int(i): float(np.mean(post[:, c] - pre[:, c])) for i, c in zip(items, cols)}
    return ShiftReport(per, float(np.mean(list(per.values()))), pre, post)


def confusion(verdicts, labels) -> dict:
    v, y = np.asarray(verdicts, dtype=bool), np.asarray(labels, dtype=bool)
    if v.shape != y.shape:
        raise MetricError("verdicts and labels differ in length")
    return {"tp": int((v & y).sum()), "tn": int((~v & ~y).sum()),
            "fp": int((v & ~y).sum()), "fn": int((~v & y).sum())}


def roc_curve(distances_clean, distances_adv) -> list:
    """``(fpr, tpr, threshold)`` points, adversarial meaning ``distance > threshold``.

    Thresholds are midpoints between consecutive distinct observed distances,
    plus one below the minimum and one above the maximum. Where a midpoint
    rounds onto the upper neighbour (adjacent floats), the lower one is used.
    """
    dc, da = np.asarray(distances_clean, float), np.asarray(distances_adv, float)
    if dc.size == 0 or da.size == 0:
        raise MetricError("ROC needs both clean and adversarial samples")
    values = np.unique(np.concatenate([dc, da]))
    mids = (values[:-1] + values[1:]) / 2.0
    mids = np.where(mids < values[1:], mids, values[:-1])
    top = max(values[-1] + 1.0, np.nextafter(values[-1], np.inf))
    bottom = min(values[0] - 1.0, np.nextafter(values[0], -np.inf))
    thresholds = np.concatenate([[top], mids[::-1], [bottom]])
    return [(float((dc > t).mean()), float((da > t).mean()), float(t)) for t in thresholds]


def auc(roc: list) -> float:
    fpr = np.array([p[0] for p in roc])
    tpr = np.array([p[1] for p in roc])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def detection_metrics(verdicts, labels, distances=None) -> dict:
    """Accuracy and confusion counts; ROC/AUC as well when distances are given."""
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0:
        raise MetricError("empty test set")
    cm = confusion(verdicts, labels)
    out = {"accuracy": (cm["tp"] + cm["tn"]) / labels.size, "confusion": cm, "n": int(labels.size)}
    if distances is not None:
        d = np.asarray(distances, float)
        roc = roc_curve(d[~labels], d[labels])
        out["roc"] = roc
        out["auc"] = auc(roc)
    return out


# --- reports ------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ranking: dict = field(default_factory=dict)        # condition -> {"HR@10": .., ...}
    detection: dict = field(default_factory=dict)      # name -> {"accuracy", "confusion", "auc", ...}
    shifts: dict = field(default_factory=dict)         # attack -> {"attacked": d, "defended": d}
    eps_sweep: list = field(default_factory=list)      # rows {"epsilon", "method", "HR@10", ...}
    roc: list = field(default_factory=list)
    histograms: dict = field(default_factory=dict)     # class -> list of distances
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1, default=_jsonable)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        raw["roc"] = [tuple(p) for p in raw.get("roc", [])]
        return cls(**raw)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o)}")


def emit_report(report: MetricsReport, directory) -> dict:
    """Write ``metrics.json``, ``metrics.csv`` and the plot-ready CSVs; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"json": directory / "metrics.json", "csv": directory / "metrics.csv",
             "roc": directory / "roc.csv", "sweep": directory / "eps_sweep.csv",
             "hist": directory / "distance_histograms.csv", "detection": directory / "detection.csv"}
    paths["json"].write_text(report.to_json())
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "N", "HR", "NDCG"])
        for cond in sorted(report.ranking):
            row = report.ranking[cond]
            ns = sorted({int(k.split("@")[1]) for k in row if k.startswith("HR@")})
            for n in ns:
                w.writerow([cond, n, row[f"HR@{n}"], row[f"NDCG@{n}"]])
    with open(paths["roc"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        w.writerows(report.roc)
    with open(paths["sweep"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        keys = sorted({k for row in report.eps_sweep for k in row} - {"epsilon"})
        w.writerow(["epsilon"] + keys)
        for row in report.eps_sweep:
            w.writerow([row["epsilon"]] + [row.get(k, "") for k in keys])
    with open(paths["hist"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "distance"])
        for cls in sorted(report.histograms):
            for d in report.histograms[cls]:
                w.writerow([cls, d])
    with open(paths["detection"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "accuracy", "auc", "tp", "tn", "fp", "fn"])
        for name in sorted(report.detection):
            d = report.detection[name]
            cm = d.get("confusion", {})
            w.writerow([name, d.get("accuracy", ""), d.get("auc", ""), cm.get("tp", ""), cm.get("tn", ""),
                        cm.get("fp", ""), cm.get("fn", "")])
    return paths
