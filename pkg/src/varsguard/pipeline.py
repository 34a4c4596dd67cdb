"""Staged training and evaluation over a run directory.

Stages run in a fixed order and each one persists its outputs:

    data -> rs -> attack -> denoiser -> detector -> joint
         -> defend-eval, detect-eval, shift-eval -> report

Every stage records a key (hash of the config it depends on plus its
upstream keys) under ``stages/``. ``run_pipeline`` skips a stage whose record
matches, so a run directory seeded with another run's upstream artifacts only
recomputes what the config change touches.

Layout::

    config.snapshot            YAML of the run config
    checkpoints/<stage>.safetensors
    manifests/<catalog>/       adversarial catalogs (per-item .npy + manifest.json)
    logs/metrics.jsonl         one JSON object per logged event
    report/                    evaluation outputs
    snapshots/<command>.json   config digest and input hashes per command
    stages/<stage>.json        stage completion records
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .attacks import AdversarialBatch, AttackConfig, attack_catalog, expa_attack, insa_attack, taamr_attack
from .config import RunConfig
from .data import (ImageStore, InteractionDataset, SplitSpec, SyntheticSpec, generate_synthetic,
                   leave_one_out_split, load_interactions, preprocess, sample_triplets)
from .denoiser import (DenoiserNet, DenoiserSchedule, PerceptualConfig, RandomizationConfig, denoise,
                       draw_input_kinds, perceptual_loss, pixel_loss, random_transform, train_denoiser)
from .detector import (FALLBACK_THRESHOLD, ContrastiveConfig, DetectorEncoder, DetectorSchedule,
                       calibrate_threshold, contrastive_loss, detection_distances, embed,
                       train_detector)
from .evaluation import (MetricsReport, RankingEvalConfig, auc, detection_metrics, emit_report,
                         prediction_shift, ranking_metrics, sample_candidates)
from .io import file_digest, load_container, load_module_state, save_container
from .recsys import VBPR, TrainConfig, amr_train, bpr_loss, train_bpr
from .seeding import stage_seed
from .vision import ClassifierHead, FeatureExtractor, compute_features, pretrain_extractor, write_feature_table

RUN_ROOT_ENV = "VARSGUARD_RUN_ROOT"

# stage -> command that produces it
STAGE_COMMANDS = {
    "data": "synth", "rs": "train-rs", "attack": "attack", "denoiser": "train-denoiser",
    "detector": "train-detector", "joint": "finetune-joint",
    "defend_eval": "defend-eval", "detect_eval": "detect-eval", "shift_eval": "shift-eval",
}
STAGE_ORDER = ("data", "rs", "attack", "denoiser", "detector", "joint", "defend_eval", "detect_eval", "shift_eval")


class DependencyError(RuntimeError):
    def __init__(self, stage: str, needed_by: str):
        self.stage, self.command = stage, STAGE_COMMANDS[stage]
        super().__init__(f"{needed_by} needs the output of `{self.command}`; run it first")


class StageLossError(RuntimeError):
    pass


# --- joint objective ---------------------------------------------------------------

@dataclass
class JointLossWeights:
    alpha: float = 1.0
    beta: float = 100.0
    xi: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.xi) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class AblationSwitches:
    disable_detector_and_contrastive: bool = False
    disable_perceptual: bool = False
    disable_randomization: bool = False


def total_loss(pix, perc, contr, rs, weights: JointLossWeights):
    """``L_pix + alpha L_perc + beta L_contr + xi L_rs``; every component must be finite."""
    for name, v in (("pixel", pix), ("perceptual", perc), ("contrastive", contr), ("recommender", rs)):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise StageLossError(f"non-finite {name} loss")
    return pix + weights.alpha * perc + weights.beta * contr + weights.xi * rs


# --- run directory -----------------------------------------------------------------

class RunDir:
    def __init__(self, root, config: RunConfig):
        self.root = Path(root)
        self.config = config
        for sub in ("checkpoints", "manifests", "logs", "report", "snapshots", "stages"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        (self.root / "config.snapshot").write_text(config.to_yaml())

    def ckpt(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.safetensors"

    def manifest(self, name: str) -> Path:
        return self.root / "manifests" / name

    def report_file(self, name: str) -> Path:
        return self.root / "report" / name

    def log(self, event: dict):
        with open(self.root / "logs" / "metrics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True, default=_plain) + "\n")

    # stage records
    def record(self, stage: str) -> dict | None:
        p = self.root / "stages" / f"{stage}.json"
        return json.loads(p.read_text()) if p.exists() else None

    def mark(self, stage: str, key: str, info: dict | None = None):
        (self.root / "stages" / f"{stage}.json").write_text(
            json.dumps({"key": key, **(info or {})}, sort_keys=True, indent=1))

    def require(self, stage: str, needed_by: str) -> dict:
        rec = self.record(stage)
        if rec is None:
            raise DependencyError(stage, needed_by)
        return rec

    def snapshot(self, command: str, inputs: list[Path]):
        hashes = {str(p.relative_to(self.root)): file_digest(p) for p in inputs if p.exists()}
        (self.root / "snapshots" / f"{command}.json").write_text(json.dumps(
            {"command": command, "config_digest": self.config.digest(), "inputs": hashes},
            sort_keys=True, indent=1))


def _plain(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def stage_key(cfg: RunConfig, stage: str) -> str:
    """Hash of everything a stage's output depends on, chained through its upstream stages."""
    d = cfg.to_dict()
    sch, a, m, l = d["schedule"], d["attack"], d["model"], d["loss"]
    pick = {
        "data": {"seed": cfg.seed, "data": d["data"]},
        "rs": {"k": m["k"], "widths": m["extractor_widths"], "lam": l["lam"],
               "rand": d["randomization"]["min_fraction"],
               **{k: v for k, v in sch.items() if k.startswith(("extractor", "rs_", "amr_"))}},
        "attack": {k: a[k] for k in ("epsilons", "methods", "train_epsilon", "pgd_steps", "n_triplets")},
        "denoiser": {"width": m["denoiser_width"], "blocks": m["denoiser_blocks"],
                     "trailing": m["denoiser_trailing"], "alpha": _alpha(cfg),
                     **{k: v for k, v in sch.items() if k.startswith("denoiser")}},
        "detector": {"enabled": not cfg.ablation.disable_detector_and_contrastive,
                     "hidden": m["detector_hidden"], "z": m["z_dim"], "norm": m["normalize_embeddings"],
                     "backbone": m["detector_backbone"], "tau": l["tau"],
                     **{k: v for k, v in sch.items() if k.startswith("detector")}},
        "joint": {"weights": asdict(joint_weights(cfg)),
                  **{k: v for k, v in sch.items() if k.startswith("joint")}},
    }
    order = ("data", "rs", "attack", "denoiser", "detector", "joint")
    chain = []
    for st in order[: order.index(stage) + 1]:
        chain.append(pick[st])
    return json_digest(chain)


def json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_plain).encode()).hexdigest()[:16]


def _alpha(cfg: RunConfig) -> float:
    return 0.0 if cfg.ablation.disable_perceptual else cfg.loss.alpha


def joint_weights(cfg: RunConfig) -> JointLossWeights:
    beta = 0.0 if cfg.ablation.disable_detector_and_contrastive else cfg.loss.beta
    return JointLossWeights(_alpha(cfg), beta, cfg.loss.xi)


# --- loaded state ------------------------------------------------------------------

@dataclass
class DataBundle:
    full: InteractionDataset
    split: SplitSpec
    store: ImageStore
    cold: np.ndarray          # items withheld from defense training
    warm: np.ndarray

    @property
    def calib_items(self) -> np.ndarray:
        return self.cold[: len(self.cold) // 2]

    @property
    def test_items(self) -> np.ndarray:
        return self.cold[len(self.cold) // 2 :]


def save_data(run: RunDir, full: InteractionDataset, split: SplitSpec, store: ImageStore, cold: np.ndarray):
    arrays = {"pairs": full.pairs, "images": store.images, "cold": np.asarray(cold, dtype=np.int64)}
    if store.labels is not None:
        arrays["labels"] = np.asarray(store.labels, dtype=np.int64)
    meta = {"num_users": full.num_users, "num_items": full.num_items, "split": split.to_json(),
            "user_keys": list(full.user_keys), "item_keys": list(full.item_keys)}
    save_container(run.ckpt("data"), arrays, "dataset", meta)


def load_data(run: RunDir) -> DataBundle:
    run.require("data", "this command")
    arrays, meta = load_container(run.ckpt("data"), "dataset")
    full = InteractionDataset.from_pairs(meta["num_users"], meta["num_items"], arrays["pairs"],
                                         tuple(meta["user_keys"]), tuple(meta["item_keys"]))
    split = SplitSpec.from_json(meta["split"], full)
    store = ImageStore(arrays["images"], arrays.get("labels"))
    cold = arrays["cold"]
    warm = np.setdiff1d(np.arange(full.num_items), cold)
    return DataBundle(full, split, store, cold, warm)


@dataclass
class RsBundle:
    fe: FeatureExtractor
    head: ClassifierHead | None
    model: VBPR
    amr: VBPR
    features: torch.Tensor


def load_rs(run: RunDir, final: bool = False) -> RsBundle:
    """Frozen extractor, class head, recommender and AMR model.

    With ``final`` the recommender updated by joint fine-tuning is used when one exists.
    """
    run.require("rs", "this command")
    arrays, cfg = load_container(run.ckpt("extractor"), "extractor")
    fe = FeatureExtractor(cfg["widths"], cfg["strides"], cfg["in_channels"], cfg["image_side"])
    load_module_state(fe, arrays).freeze()
    head = None
    if run.ckpt("classifier").exists():
        arrays, hc = load_container(run.ckpt("classifier"), "classifier")
        head = load_module_state(ClassifierHead(hc["dim"], hc["num_classes"]), arrays).eval()
        for p in head.parameters():
            p.requires_grad_(False)
    use_joint = final and run.record("joint") is not None and run.ckpt("joint_vbpr").exists()
    model = VBPR.load(run.ckpt("joint_vbpr" if use_joint else "vbpr")).freeze()
    amr = VBPR.load(run.ckpt("amr")).freeze()
    data = load_data(run)
    return RsBundle(fe, head, model, amr, compute_features(fe, data.store.images))


def catalog_name(split: str, method: str, eps: float, target: str = "vbpr") -> str:
    return f"{split}_{method}_eps{eps:g}" + ("" if target == "vbpr" else f"_{target}")


def load_catalog(run: RunDir, name: str, clean: np.ndarray) -> np.ndarray:
    d = run.manifest(name)
    if not (d / "manifest.json").exists():
        raise DependencyError("attack", f"catalog {name}")
    return AdversarialBatch.load(d, clean).full_catalog(clean)


def load_defense(run: RunDir, needed_by: str):
    """Final denoiser and detector (joint checkpoints when present) plus the detector threshold."""
    if run.record("joint") is not None and run.ckpt("joint_denoiser").exists():
        net, _ = DenoiserNet.load(run.ckpt("joint_denoiser"))
        det_path = run.ckpt("joint_detector")
    else:
        if run.record("denoiser") is None:
            raise DependencyError("denoiser", needed_by)
        net, _ = DenoiserNet.load(run.ckpt("denoiser"))
        det_path = run.ckpt("detector")
    enc, threshold = None, None
    if det_path.exists():
        enc, dcfg = DetectorEncoder.load(det_path)
        threshold = dcfg.get("threshold", FALLBACK_THRESHOLD)
    return net, enc, threshold


# --- stages ------------------------------------------------------------------------

def stage_data(run: RunDir, cfg: RunConfig):
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticSpec(d.num_users, d.num_items, d.num_latent_classes, d.interactions_per_user,
                             d.image_side, d.noise_std, stage_seed(cfg.seed, "synthetic"),
                             d.affinity_concentration, d.contrast)
        full, store = generate_synthetic(spec)
    else:
        raw = load_interactions(d.interactions_path)
        full = preprocess(raw, d.min_interactions)
        store = ImageStore.load(d.images_path, full.num_items, item_keys=full.item_keys)
    split = leave_one_out_split(full, stage_seed(cfg.seed, "split"))
    rng = np.random.default_rng(stage_seed(cfg.seed, "cold"))
    n_cold = max(2, int(round(d.cold_fraction * full.num_items)))
    cold = np.sort(rng.choice(full.num_items, size=n_cold, replace=False))
    cold = cold[rng.permutation(n_cold)]        # random calibration/test halves
    save_data(run, full, split, store, cold)
    run.log({"stage": "data", "num_users": full.num_users, "num_items": full.num_items,
             "interactions": full.num_interactions, "cold": int(n_cold)})


def stage_rs(run: RunDir, cfg: RunConfig):
    data = load_data(run)
    s = cfg.schedule
    fe = FeatureExtractor(cfg.model.extractor_widths, image_side=data.store.image_side,
                          in_channels=data.store.channels, seed=stage_seed(cfg.seed, "extractor"))
    head = None
    if data.store.labels is not None:
        n_cls = int(data.store.labels.max()) + 1
        head = pretrain_extractor(fe, data.store.images, data.store.labels, n_cls, epochs=s.extractor_epochs,
                                  lr=s.extractor_lr, seed=stage_seed(cfg.seed, "extractor-train"),
                                  resize_min_fraction=cfg.randomization.min_fraction)
        save_container(run.ckpt("classifier"), dict(head.state_dict()), "classifier",
                       {"dim": fe.pooled_dim, "num_classes": n_cls})
    else:
        fe.freeze()
    save_container(run.ckpt("extractor"), dict(fe.state_dict()), "extractor", fe.config())
    feats = compute_features(fe, data.store.images)
    write_feature_table(run.root / "checkpoints" / "features.vgf", np.arange(len(feats)), feats.numpy())
    rs_cfg = TrainConfig(epochs=s.rs_epochs, learning_rate=s.rs_lr, lam=cfg.loss.lam,
                         rng_seed=stage_seed(cfg.seed, "rs"))
    model = train_bpr(data.split.train, feats, rs_cfg, k=cfg.model.k, log=run.log)
    model.save(run.ckpt("vbpr"))
    amr_cfg = TrainConfig(epochs=s.amr_epochs, learning_rate=s.amr_lr, decay_at=1.0, lam=cfg.loss.lam,
                          rng_seed=stage_seed(cfg.seed, "amr"))
    amr = amr_train(VBPR.load(run.ckpt("vbpr")), data.split.train, feats, amr_cfg, eps_feat=s.amr_eps, log=run.log)
    amr.save(run.ckpt("amr"))


def _attack_cfg(cfg: RunConfig, method: str, eps: float, seed: int) -> AttackConfig:
    return AttackConfig(method=method, epsilon=float(eps), steps=1 if method == "fgsm" else cfg.attack.pgd_steps,
                        rng_seed=seed, n_triplets=cfg.attack.n_triplets)


def make_catalog(run: RunDir, cfg: RunConfig, split: str, method: str, eps: float, target: str = "vbpr",
                 data: DataBundle | None = None, rs: RsBundle | None = None) -> Path:
    data = data or load_data(run)
    rs = rs or load_rs(run)
    model = rs.model if target == "vbpr" else rs.amr
    items = data.warm if split == "train" else None
    seed = stage_seed(cfg.seed, f"attack-{split}")
    batch = attack_catalog(model, rs.fe, data.split.train, data.store, _attack_cfg(cfg, method, eps, seed),
                           items=items, jobs=cfg.jobs)
    out = batch.save(run.manifest(catalog_name(split, method, eps, target)))
    run.log({"stage": "attack", "catalog": out.name, "items": len(batch.item_ids),
             "max_linf": float(batch.achieved_linf.max()) if len(batch.item_ids) else 0.0})
    return out


def stage_attack(run: RunDir, cfg: RunConfig):
    data, rs = load_data(run), load_rs(run)
    te = cfg.attack.train_epsilon
    for method in ("fgsm", "pgd"):
        make_catalog(run, cfg, "train", method, te, data=data, rs=rs)
    for method in cfg.attack.methods:
        for eps in cfg.attack.epsilons:
            make_catalog(run, cfg, "eval", method, eps, data=data, rs=rs)
    make_catalog(run, cfg, "eval", "pgd", te, target="amr", data=data, rs=rs)


def _train_catalogs(run: RunDir, cfg: RunConfig, clean: np.ndarray) -> dict:
    te = cfg.attack.train_epsilon
    return {m: load_catalog(run, catalog_name("train", m, te), clean) for m in ("fgsm", "pgd")}


def stage_denoiser(run: RunDir, cfg: RunConfig):
    data, rs = load_data(run), load_rs(run)
    catalogs = _train_catalogs(run, cfg, data.store.images)
    m, s = cfg.model, cfg.schedule
    net = DenoiserNet(data.store.channels, m.denoiser_width, m.denoiser_blocks, m.denoiser_trailing,
                      seed=stage_seed(cfg.seed, "denoiser-init"))
    sched = DenoiserSchedule(s.denoiser_phase1_epochs, s.denoiser_phase2_epochs, s.denoiser_lr, s.denoiser_batch,
                             _alpha(cfg), stage_seed(cfg.seed, "denoiser"))
    train_denoiser(net, rs.fe, data.store.images, catalogs, data.warm, sched, log=run.log)
    net.save(run.ckpt("denoiser"), {"randomization": asdict(cfg.randomization)})


def new_encoder(cfg: RunConfig, rs: RsBundle, image_side: int, channels: int) -> DetectorEncoder:
    m = cfg.model
    seed = stage_seed(cfg.seed, "detector-init")
    if m.detector_backbone == "shared":
        backbone = rs.fe
    else:
        backbone = FeatureExtractor(m.extractor_widths, in_channels=channels, image_side=image_side, seed=seed)
        if m.detector_backbone == "copy":
            backbone.load_state_dict(rs.fe.state_dict())
    enc = DetectorEncoder(backbone, m.detector_hidden, m.z_dim, m.normalize_embeddings, seed=seed)
    return enc


def calibrate(run: RunDir, cfg: RunConfig, enc: DetectorEncoder, net: DenoiserNet, data: DataBundle):
    """Threshold from the calibration half of the cold items (clean vs FGSM at the training budget)."""
    adv = load_catalog(run, catalog_name("eval", "fgsm", cfg.attack.train_epsilon), data.store.images)
    items = data.calib_items
    dc = detection_distances(enc, net, torch.as_tensor(data.store.images[items]))
    da = detection_distances(enc, net, torch.as_tensor(adv[items]))
    theta, roc = calibrate_threshold(dc, da)
    return theta, auc(roc)


def stage_detector(run: RunDir, cfg: RunConfig):
    if cfg.ablation.disable_detector_and_contrastive:
        run.ckpt("detector").unlink(missing_ok=True)
        run.log({"stage": "detector", "skipped": "ablation"})
        return
    data, rs = load_data(run), load_rs(run)
    run.require("denoiser", "train-detector")
    net, _ = DenoiserNet.load(run.ckpt("denoiser"))
    fgsm = _train_catalogs(run, cfg, data.store.images)["fgsm"]
    enc = new_encoder(cfg, rs, data.store.image_side, data.store.channels)
    s = cfg.schedule
    sched = DetectorSchedule(s.detector_epochs, s.detector_lr, s.detector_batch, stage_seed(cfg.seed, "detector"),
                             s.detector_noise_fraction, cfg.eval.noise_sigma)
    ccfg = ContrastiveConfig(cfg.loss.tau, cfg.model.z_dim, cfg.model.normalize_embeddings)
    train_detector(enc, net, data.store.images, fgsm, data.warm, ccfg, sched, log=run.log)
    theta, val_auc = calibrate(run, cfg, enc, net, data)
    run.log({"stage": "detector", "threshold": theta, "calibration_auc": val_auc})
    enc.save(run.ckpt("detector"), {"threshold": theta, "tau": cfg.loss.tau})


def joint_finetune(net: DenoiserNet, enc: DetectorEncoder | None, model: VBPR, fe: FeatureExtractor,
                   clean: np.ndarray, catalogs: dict, train: InteractionDataset, items, cfg: RunConfig,
                   seed: int, log=None):
    """Fine-tune denoiser and detector together under the weighted joint loss.

    Each iteration draws one input kind (clean, FGSM or PGD, equal odds) for a
    batch of training triplets whose items are all in ``items``. The denoised
    images of both items feed the pixel, perceptual and recommender terms;
    the quadruples of the preferred items, rebuilt with the current denoiser,
    feed the contrastive term. The recommender stays frozen unless the
    schedule says otherwise.
    """
    w = joint_weights(cfg)
    s = cfg.schedule
    allowed = np.zeros(len(clean), dtype=bool)
    allowed[np.asarray(items)] = True
    rng = np.random.default_rng([seed, 5])
    x_clean = torch.as_tensor(clean)
    sources = [x_clean, torch.as_tensor(catalogs["fgsm"]), torch.as_tensor(catalogs["pgd"])]
    params = list(net.parameters())
    if enc is not None and w.beta > 0:
        params += [p for p in enc.parameters() if p.requires_grad]
    if s.joint_update_recommender:
        for p in model.parameters():
            p.requires_grad_(True)
        params += list(model.parameters())
    opt = torch.optim.Adam(params, lr=s.joint_lr)
    ccfg = ContrastiveConfig(cfg.loss.tau, cfg.model.z_dim, cfg.model.normalize_embeddings)
    pcfg = PerceptualConfig()
    n_iter = max(1, (int(allowed.sum()) + s.joint_batch - 1) // s.joint_batch)
    net.train()
    if enc is not None:
        enc.train()
    for epoch in range(s.joint_epochs):
        kinds = draw_input_kinds(2, n_iter, rng)
        totals = np.zeros(5)
        for it in range(n_iter):
            trip = sample_triplets(train, 4 * s.joint_batch, rng)
            trip = trip[allowed[trip[:, 1]] & allowed[trip[:, 2]]][: s.joint_batch]
            if len(trip) == 0:
                continue
            u, i, j = (torch.as_tensor(trip[:, c]) for c in range(3))
            k = int(kinds[it])
            x_in = torch.cat([sources[k][i], sources[k][j]])
            target = torch.cat([x_clean[i], x_clean[j]])
            x_hat = net(x_in)
            l_pix = pixel_loss(x_hat, target)
            l_perc = perceptual_loss(fe, x_hat, target, pcfg) if w.alpha > 0 else x_hat.new_zeros(())
            b = len(trip)
            f_hat = fe(x_hat)
            l_rs = bpr_loss(model, u, i, j, f_pos=f_hat[:b], f_neg=f_hat[b:])
            l_contr = x_hat.new_zeros(())
            if enc is not None and w.beta > 0:
                adv_src = sources[k] if k > 0 else sources[1]
                x_adv = adv_src[i]
                if k == 0:
                    clean_de, adv_de = x_hat[:b], net(x_adv)
                else:
                    clean_de, adv_de = net(x_clean[i]), x_hat[:b]
                quads = torch.stack([x_clean[i], x_adv, clean_de, adv_de], 1)
                l_contr = contrastive_loss(enc, quads, ccfg)
            loss = total_loss(l_pix, l_perc, l_contr, l_rs, w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += [loss.item(), l_pix.item(), l_perc.item(), l_contr.item(), l_rs.item()]
        if log is not None:
            log({"stage": "joint", "epoch": epoch, **dict(zip(("total", "pix", "perc", "contr", "rs"),
                                                              (totals / n_iter).tolist()))})
    net.eval()
    if enc is not None:
        enc.eval()
    model.freeze()
    return net, enc


def stage_joint(run: RunDir, cfg: RunConfig):
    data, rs = load_data(run), load_rs(run)
    run.require("denoiser", "finetune-joint")
    net, _ = DenoiserNet.load(run.ckpt("denoiser"))
    enc = None
    if not cfg.ablation.disable_detector_and_contrastive:
        if not run.ckpt("detector").exists():
            raise DependencyError("detector", "finetune-joint")
        enc, _ = DetectorEncoder.load(run.ckpt("detector"))
    catalogs = _train_catalogs(run, cfg, data.store.images)
    joint_finetune(net, enc, rs.model, rs.fe, data.store.images, catalogs, data.split.train, data.warm, cfg,
                   stage_seed(cfg.seed, "joint"), log=run.log)
    net.save(run.ckpt("joint_denoiser"), {"randomization": asdict(cfg.randomization)})
    if cfg.schedule.joint_update_recommender:
        rs.model.save(run.ckpt("joint_vbpr"))
    else:
        run.ckpt("joint_vbpr").unlink(missing_ok=True)
    run.ckpt("joint_detector").unlink(missing_ok=True)
    if enc is not None:
        theta, val_auc = calibrate(run, cfg, enc, net, data)
        run.log({"stage": "joint", "threshold": theta, "calibration_auc": val_auc})
        enc.save(run.ckpt("joint_detector"), {"threshold": theta, "tau": cfg.loss.tau})


# --- evaluation --------------------------------------------------------------------

def _features(fe, x: np.ndarray | torch.Tensor) -> torch.Tensor:
    return compute_features(fe, x)


def defended_images(net: DenoiserNet, x, rand: RandomizationConfig | None = None) -> torch.Tensor:
    y = denoise(net, torch.as_tensor(x))
    if rand is not None and rand.enabled:
        y = random_transform(y, rand, np.random.default_rng(rand.rng_seed))
    return y


def stage_defend_eval(run: RunDir, cfg: RunConfig) -> dict:
    net, _, _ = load_defense(run, "defend-eval")
    data, rs = load_data(run), load_rs(run, final=True)
    ecfg = RankingEvalConfig(tuple(cfg.eval.ns), cfg.eval.negatives_per_user, stage_seed(cfg.seed, "candidates"))
    cands = sample_candidates(data.full, data.split.test, ecfg)
    users = np.array(sorted(data.split.test))
    rand = RandomizationConfig(not cfg.ablation.disable_randomization, cfg.randomization.min_fraction,
                               stage_seed(cfg.seed, "randomization"))

    def metrics(model, feats):
        return ranking_metrics(model.score_matrix(feats).numpy(), cands, users, ecfg.ns)

    clean = data.store.images
    conds = {"clean": metrics(rs.model, rs.features),
             "defended_clean": metrics(rs.model, _features(rs.fe, defended_images(net, clean))),
             "defended_rand_clean": metrics(rs.model, _features(rs.fe, defended_images(net, clean, rand)))}
    sweep = []
    te = cfg.attack.train_epsilon
    for eps in cfg.attack.epsilons:
        row = {"epsilon": eps}                  # one row per budget, methods side by side
        for method in cfg.attack.methods:
            adv = load_catalog(run, catalog_name("eval", method, eps), clean)
            for tag, feats in (("attacked", _features(rs.fe, adv)),
                               ("defended", _features(rs.fe, defended_images(net, adv))),
                               ("defended_rand", _features(rs.fe, defended_images(net, adv, rand)))):
                m = metrics(rs.model, feats)
                row.update({f"{method} {tag} {k}": v for k, v in m.items()})
                if eps == te:
                    conds[f"{tag}_{method}"] = m
        sweep.append(row)
    amr_adv = load_catalog(run, catalog_name("eval", "pgd", te, "amr"), clean)
    conds["amr_clean"] = metrics(rs.amr, rs.features)
    conds["amr_pgd"] = metrics(rs.amr, _features(rs.fe, amr_adv))
    out = {"ranking": conds, "eps_sweep": sweep}
    run.report_file("ranking.json").write_text(json.dumps(out, sort_keys=True, indent=1))
    run.log({"stage": "defend_eval", "HR@10": {c: v["HR@10"] for c, v in conds.items()}})
    return out


def stage_detect_eval(run: RunDir, cfg: RunConfig) -> dict:
    net, enc, theta = load_defense(run, "detect-eval")
    data = load_data(run)
    if enc is None:
        out = {"detection": {}, "roc": [], "histograms": {}, "disabled": True}
        run.report_file("detection.json").write_text(json.dumps(out, sort_keys=True, indent=1))
        return out
    items = data.test_items
    clean = data.store.images
    dc = detection_distances(enc, net, torch.as_tensor(clean[items]))
    det, hist, main_roc = {}, {"clean": dc.tolist()}, []
    labels = np.r_[np.zeros(len(items), bool), np.ones(len(items), bool)]
    for method in cfg.attack.methods:
        for eps in cfg.attack.epsilons:
            adv = load_catalog(run, catalog_name("eval", method, eps), clean)
            da = detection_distances(enc, net, torch.as_tensor(adv[items]))
            d = np.r_[dc, da]
            m = detection_metrics(d > theta, labels, d)
            roc = m.pop("roc")
            det[f"{method}_eps{eps:g}"] = {**m, "epsilon": eps, "method": method}
            hist[f"{method}_eps{eps:g}"] = da.tolist()
            if method == "fgsm" and eps == cfg.attack.train_epsilon:
                main_roc = roc
    rng = np.random.default_rng(stage_seed(cfg.seed, "noise-control"))
    x_noise = torch.as_tensor(clean[items]) + cfg.eval.noise_sigma * torch.as_tensor(
        rng.standard_normal(size=clean[items].shape), dtype=torch.float32)
    dn = detection_distances(enc, net, x_noise.clamp(0.0, 1.0))
    det["gaussian_noise"] = {"clean_rate": float(np.mean(dn <= theta)), "sigma": cfg.eval.noise_sigma,
                             "n": int(len(dn))}
    hist["gaussian_noise"] = dn.tolist()
    out = {"detection": det, "roc": main_roc, "histograms": hist, "threshold": theta}
    run.report_file("detection.json").write_text(json.dumps(out, sort_keys=True, indent=1, default=_plain))
    run.log({"stage": "detect_eval", "accuracy": {k: v.get("accuracy") for k, v in det.items()},
             "noise_clean_rate": det["gaussian_noise"]["clean_rate"]})
    return out


def targeted_items(data: DataBundle, count: int) -> tuple[np.ndarray, int, int]:
    """Cold items outside the most popular class, the most popular item (hook) and that class."""
    pop = data.split.train.item_popularity()
    hook = int(np.argmax(pop))
    labels = data.store.labels
    if labels is not None:
        class_pop = np.bincount(labels, weights=pop, minlength=int(labels.max()) + 1)
        target_class = int(np.argmax(class_pop))
        pool = np.array([i for i in data.cold if labels[i] != target_class], dtype=np.int64)
    else:
        target_class = -1
        pool = data.cold[data.cold != hook]
    return np.sort(pool[:count]), hook, target_class


def stage_shift_eval(run: RunDir, cfg: RunConfig) -> dict:
    net, _, _ = load_defense(run, "shift-eval")
    data, rs = load_data(run), load_rs(run, final=True)
    items, hook, target_class = targeted_items(data, cfg.attack.targeted_items)
    x = torch.as_tensor(data.store.images[items])
    acfg = AttackConfig(method="pgd", epsilon=cfg.attack.targeted_epsilon, steps=cfg.attack.pgd_steps)
    attacks = {"insa": lambda: insa_attack(rs.model, rs.fe, x, acfg, items),
               "expa": lambda: expa_attack(rs.fe, x, rs.features[hook], acfg)}
    if rs.head is not None and target_class >= 0:
        attacks["taamr"] = lambda: taamr_attack(rs.fe, rs.head, x, target_class, acfg)
    rand = RandomizationConfig(not cfg.ablation.disable_randomization, cfg.randomization.min_fraction,
                               stage_seed(cfg.seed, "randomization"))
    model = rs.model

    def scores(imgs):
        f = _features(rs.fe, imgs)
        with torch.no_grad():
            return (model.gamma_u @ (model.gamma_i[items] + f @ model.E.T).T).numpy()

    pre = scores(x)
    shifts = {}
    for name, run_attack in attacks.items():
        x_adv = run_attack()
        att = prediction_shift(pre, scores(x_adv), items)
        dfd = prediction_shift(pre, scores(defended_images(net, x_adv)), items)
        dfr = prediction_shift(pre, scores(defended_images(net, x_adv, rand)), items)
        shifts[name] = {"attacked": att.delta_set, "defended": dfd.delta_set, "defended_rand": dfr.delta_set,
                        "linf": float((x_adv - x).abs().max())}
    base = prediction_shift(pre, scores(defended_images(net, x)), items)
    out = {"shifts": shifts, "defended_clean_shift": base.delta_set, "items": items.tolist(),
           "hook_item": hook, "target_class": target_class}
    run.report_file("shifts.json").write_text(json.dumps(out, sort_keys=True, indent=1))
    run.log({"stage": "shift_eval", **{k: v["attacked"] for k, v in shifts.items()}})
    return out


def build_report(run: RunDir, cfg: RunConfig) -> MetricsReport:
    parts = {}
    for name, stage in (("ranking.json", "defend_eval"), ("detection.json", "detect_eval"),
                        ("shifts.json", "shift_eval")):
        p = run.report_file(name)
        if not p.exists():
            raise DependencyError(stage, "report")
        parts[name] = json.loads(p.read_text())
    r, d, s = parts["ranking.json"], parts["detection.json"], parts["shifts.json"]
    report = MetricsReport(ranking=r["ranking"], detection=d["detection"], shifts=s["shifts"],
                           eps_sweep=r["eps_sweep"], roc=[tuple(p) for p in d["roc"]],
                           histograms=d["histograms"],
                           meta={"config_digest": cfg.digest(), "seed": cfg.seed, "profile": cfg.profile,
                                 "threshold": d.get("threshold"),
                                 "ablation": asdict(cfg.ablation),
                                 "stage_keys": {st: (run.record(st) or {}).get("key") for st in STAGE_ORDER}})
    emit_report(report, run.root / "report")
    return report


# --- export ------------------------------------------------------------------------

EMBED_MAGIC = b"VGEMB1\0\0"
VARIANT_TAGS = ("clean", "adv", "clean_de", "adv_de")


def export_embeddings(run: RunDir, cfg: RunConfig, path=None) -> Path:
    """Binary table of detector embeddings of the cold test items in all four variants.

    Layout: magic, uint32 Z, uint32 count, then records
    ``(int64 item_id, uint8 variant_tag, float32[Z])``; tags index ``VARIANT_TAGS``.
    """
    data = load_data(run)
    net, enc, _ = load_defense(run, "export-embeddings")
    if enc is None:
        raise DependencyError("detector", "export-embeddings")
    items = data.test_items
    adv = load_catalog(run, catalog_name("eval", "fgsm", cfg.attack.train_epsilon), data.store.images)
    xc, xa = torch.as_tensor(data.store.images[items]), torch.as_tensor(adv[items])
    variants = (xc, xa, denoise(net, xc), denoise(net, xa))
    z = [embed(enc, v).numpy() for v in variants]
    dim = z[0].shape[1]
    rec = np.zeros(len(items) * 4, dtype=[("id", "<i8"), ("tag", "u1"), ("z", "<f4", (dim,))])
    for t, zt in enumerate(z):
        rec["id"][t::4], rec["tag"][t::4], rec["z"][t::4] = items, t, zt
    path = Path(path) if path else run.report_file("embeddings.bin")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(np.array([dim, len(rec)], dtype="<u4").tobytes())
        fh.write(rec.tobytes())
    return path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != EMBED_MAGIC:
            raise ValueError(f"{path}: not an embedding table")
        dim, count = np.frombuffer(fh.read(8), dtype="<u4")
        rec = np.frombuffer(fh.read(), dtype=[("id", "<i8"), ("tag", "u1"), ("z", "<f4", (int(dim),))],
                            count=int(count))
    return rec["id"].copy(), rec["tag"].copy(), rec["z"].copy()


# --- transfer ----------------------------------------------------------------------

def transfer_finetune(net: DenoiserNet, fe: FeatureExtractor, clean: np.ndarray, catalogs: dict, items,
                      epochs: int, learning_rate: float = 1e-3, alpha: float = 1.0, seed: int = 0,
                      log=None) -> DenoiserNet:
    """Continue training a denoiser on another dataset with the mixed clean/FGSM/PGD schedule."""
    if clean.shape[1:] != (net.channels,) + clean.shape[2:] or clean.shape[2] != fe.image_side:
        raise ValueError(f"target images {clean.shape[1:]} do not fit the denoiser/extractor")
    if epochs == 0:
        return net
    sched = DenoiserSchedule(0, epochs, learning_rate, 16, alpha, seed)
    return train_denoiser(net, fe, clean, catalogs, items, sched, log=log, phases=(2,))


# --- driver ------------------------------------------------------------------------

STAGE_FUNCS = {
    "data": stage_data, "rs": stage_rs, "attack": stage_attack, "denoiser": stage_denoiser,
    "detector": stage_detector, "joint": stage_joint,
}
EVAL_FUNCS = {"defend_eval": stage_defend_eval, "detect_eval": stage_detect_eval, "shift_eval": stage_shift_eval}
UPSTREAM = {"rs": "data", "attack": "rs", "denoiser": "attack", "detector": "denoiser", "joint": "detector",
            "defend_eval": "joint", "detect_eval": "joint", "shift_eval": "joint"}


def configure_torch():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def run_stage(run: RunDir, cfg: RunConfig, stage: str, force: bool = False) -> bool:
    """Run one training stage unless an up-to-date record exists; returns whether it ran."""
    key = stage_key(cfg, stage)
    rec = run.record(stage)
    if rec is not None and rec.get("key") == key and not force:
        return False
    if stage != "data":
        up = UPSTREAM[stage]
        if run.record(up) is None:
            raise DependencyError(up, STAGE_COMMANDS[stage])
    STAGE_FUNCS[stage](run, cfg)
    run.mark(stage, key)
    # later stages are now stale
    for st in STAGE_ORDER[STAGE_ORDER.index(stage) + 1 :]:
        p = run.root / "stages" / f"{st}.json"
        if p.exists() and st in STAGE_FUNCS:
            if json.loads(p.read_text()).get("key") != stage_key(cfg, st):
                p.unlink()
    run.snapshot(STAGE_COMMANDS[stage], sorted((run.root / "checkpoints").glob("*.safetensors")))
    return True


def seed_from(source_dir, target_dir):
    """Copy a finished run's artifacts so a variant run can reuse matching upstream stages."""
    source_dir, target_dir = Path(source_dir), Path(target_dir)
    for sub in ("checkpoints", "manifests", "stages"):
        if (source_dir / sub).exists():
            shutil.copytree(source_dir / sub, target_dir / sub, dirs_exist_ok=True)


def run_pipeline(cfg: RunConfig, run_dir, reuse_from=None) -> MetricsReport:
    """Run every stage in order (skipping up-to-date ones), then all evaluations and the report."""
    configure_torch()
    run_dir = Path(run_dir)
    if reuse_from is not None:
        seed_from(reuse_from, run_dir)
    run = RunDir(run_dir, cfg)
    for stage in STAGE_FUNCS:
        t0 = time.perf_counter()
        ran = run_stage(run, cfg, stage)
        run.log({"stage": stage, "event": "ran" if ran else "cached", "seconds": time.perf_counter() - t0})
    for name, fn in EVAL_FUNCS.items():
        t0 = time.perf_counter()
        fn(run, cfg)
        run.mark(name, stage_key(cfg, "joint"))
        run.log({"stage": name, "event": "ran", "seconds": time.perf_counter() - t0})
    return build_report(run, cfg)


def stage_seconds(run_dir) -> dict:
    """Wall time of the most recent execution of each stage, from the run log."""
    out = {}
    for line in (Path(run_dir) / "logs" / "metrics.jsonl").read_text().splitlines():
        e = json.loads(line)
        if "seconds" in e:
            out[e["stage"]] = e["seconds"]
    return out


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))
