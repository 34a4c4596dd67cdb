"""Run configuration: one declarative tree covering data, model sizes, attacks,
schedules, loss weights, seeds and ablation switches.

Configs are plain YAML. Unknown keys are rejected with the dotted path of the
offending field; dotted ``key=value`` overrides are applied on top.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DataConfig:
    source: str = "synthetic"                 # "synthetic" or "ingest"
    num_users: int = 240
    num_items: int = 600
    num_latent_classes: int = 8
    interactions_per_user: int = 12
    image_side: int = 32
    noise_std: float = 0.06
    contrast: float = 0.5
    affinity_concentration: float = 0.3
    interactions_path: str = ""               # ingest: ratings CSV
    images_path: str = ""                     # ingest: image directory
    min_interactions: int = 5
    cold_fraction: float = 0.25               # items withheld from denoiser/detector training


@dataclass
class ModelConfig:
    k: int = 16
    extractor_widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    denoiser_width: int = 32
    denoiser_blocks: int = 9
    denoiser_trailing: int = 2
    detector_hidden: int = 128
    z_dim: int = 128
    normalize_embeddings: bool = False
    detector_backbone: str = "copy"           # "copy" (initialised from the extractor), "fresh" or "shared"


@dataclass
class AttackSweepConfig:
    methods: list = field(default_factory=lambda: ["fgsm", "pgd"])
    epsilons: list = field(default_factory=lambda: [8, 16, 32, 64])
    train_epsilon: float = 16.0
    pgd_steps: int = 10
    n_triplets: int = 8
    targeted_items: int = 48
    targeted_epsilon: float = 16.0


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 100.0
    xi: float = 0.1
    lam: float = 1e-4
    tau: float = 0.1


@dataclass
class ScheduleConfig:
    extractor_epochs: int = 6
    extractor_lr: float = 3e-3
    rs_epochs: int = 30
    rs_lr: float = 0.01
    amr_epochs: int = 5
    amr_lr: float = 1e-3
    amr_eps: float = 0.05
    denoiser_phase1_epochs: int = 12
    denoiser_phase2_epochs: int = 8
    denoiser_lr: float = 1e-3
    denoiser_batch: int = 16
    detector_epochs: int = 2
    detector_lr: float = 1e-3
    detector_batch: int = 16
    detector_noise_fraction: float = 0.5
    joint_epochs: int = 2
    joint_lr: float = 1e-4
    joint_batch: int = 16
    joint_update_recommender: bool = False
    transfer_epochs: int = 2


# full-scale schedule, selected by profile "paper" (far beyond desk budgets)
FULL_SCALE_SCHEDULE = {
    "rs_epochs": 100, "rs_lr": 1e-3, "amr_epochs": 5, "amr_lr": 1e-4,
    "denoiser_phase1_epochs": 10, "denoiser_phase2_epochs": 3, "denoiser_lr": 1e-5,
    "detector_epochs": 2, "transfer_epochs": 3,
}


@dataclass
class RandomizationSection:
    enabled: bool = True
    min_fraction: float = 0.875


@dataclass
class EvalConfig:
    ns: list = field(default_factory=lambda: [5, 10, 20])
    negatives_per_user: int = 100
    noise_sigma: float = 64 / 255


@dataclass
class AblationConfig:
    disable_detector_and_contrastive: bool = False
    disable_perceptual: bool = False
    disable_randomization: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    jobs: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackSweepConfig = field(default_factory=AttackSweepConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    randomization: RandomizationSection = field(default_factory=RandomizationSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self, *sections: str) -> str:
        """Content hash of the whole config or of selected top-level sections."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        cfg = _build(cls, raw or {}, "")
        if cfg.profile == "paper":
            for k, v in FULL_SCALE_SCHEDULE.items():
                if k not in ((raw or {}).get("schedule") or {}):
                    setattr(cfg.schedule, k, v)
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text()) if path else {}
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("<root>", "config file must hold a mapping")
        raw = raw or {}
        for item in overrides or []:
            apply_override(raw, item)
        return cls.from_dict(raw)


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path.rstrip(".") or "<root>", "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}{unknown[0]}", "unknown key")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, f.default if sub is None else sub, f"{path}{name}")
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    return value


def apply_override(raw: dict, item: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested mapping."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot override inside a scalar")
    node[parts[-1]] = yaml.safe_load(text)
    return raw


def validate(cfg: RunConfig) -> RunConfig:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(path, msg)

    need(cfg.profile in ("desk", "paper"), "profile", "must be 'desk' or 'paper'")
    need(cfg.jobs >= 1, "jobs", "must be >= 1")
    d = cfg.data
    need(d.source in ("synthetic", "ingest"), "data.source", "must be 'synthetic' or 'ingest'")
    if d.source == "ingest":
        need(bool(d.interactions_path), "data.interactions_path", "required for ingest")
        need(bool(d.images_path), "data.images_path", "required for ingest")
    need(d.interactions_per_user >= 5, "data.interactions_per_user", "must be >= 5")
    need(d.num_latent_classes >= 2, "data.num_latent_classes", "must be >= 2")
    need(d.noise_std >= 0, "data.noise_std", "must be >= 0")
    need(0 < d.cold_fraction < 1, "data.cold_fraction", "must lie in (0, 1)")
    m = cfg.model
    need(m.k >= 1, "model.k", "must be >= 1")
    need(len(m.extractor_widths) == 4, "model.extractor_widths", "needs four stage widths")
    need(m.z_dim >= 1, "model.z_dim", "must be >= 1")
    need(m.detector_backbone in ("copy", "fresh", "shared"), "model.detector_backbone",
         "must be 'copy', 'fresh' or 'shared'")
    a = cfg.attack
    need(set(a.methods) <= {"fgsm", "pgd"} and a.methods, "attack.methods", "subset of fgsm, pgd")
    need(all(e >= 0 for e in a.epsilons) and a.epsilons, "attack.epsilons", "nonnegative budgets")
    need(a.pgd_steps >= 1, "attack.pgd_steps", "must be >= 1")
    for name in ("alpha", "beta", "xi", "lam"):
        need(getattr(cfg.loss, name) >= 0, f"loss.{name}", "must be >= 0")
    need(cfg.loss.tau > 0, "loss.tau", "must be > 0")
    for f in dataclasses.fields(cfg.schedule):
        v = getattr(cfg.schedule, f.name)
        if not isinstance(v, bool):
            need(v >= 0, f"schedule.{f.name}", "must be >= 0")
    need(0 < cfg.randomization.min_fraction <= 1, "randomization.min_fraction", "must lie in (0, 1]")
    need(cfg.eval.negatives_per_user >= max(cfg.eval.ns), "eval.negatives_per_user", "must be >= max(N)")
    return cfg
