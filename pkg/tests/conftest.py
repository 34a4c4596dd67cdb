from dataclasses import dataclass

import numpy as np
import pytest
import torch

from varsguard.data import SyntheticSpec, generate_synthetic, leave_one_out_split
from varsguard.pipeline import configure_torch
from varsguard.recsys import TrainConfig, train_bpr
from varsguard.vision import FeatureExtractor, compute_features, pretrain_extractor

configure_torch()


@dataclass
class World:
    ds: object
    split: object
    store: object
    fe: FeatureExtractor
    head: object
    model: object
    features: torch.Tensor


@pytest.fixture(scope="session")
def world() -> World:
    """A small trained extractor + recommender on 16x16 synthetic images."""
    spec = SyntheticSpec(num_users=60, num_items=150, interactions_per_user=8, image_side=16, rng_seed=1)
    ds, store = generate_synthetic(spec)
    split = leave_one_out_split(ds, 0)
    fe = FeatureExtractor((8, 16, 16, 16), image_side=16, seed=0)
    head = pretrain_extractor(fe, store.images, store.labels, spec.num_latent_classes, epochs=3, seed=0)
    feats = compute_features(fe, store.images)
    model = train_bpr(split.train, feats, TrainConfig(epochs=5), k=8).freeze()
    return World(ds, split, store, fe, head, model, feats)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY = {
    "data": {"num_users": 40, "num_items": 150, "interactions_per_user": 6, "image_side": 16},
    "model": {"denoiser_width": 8, "denoiser_blocks": 2, "z_dim": 16, "detector_hidden": 16},
    "attack": {"epsilons": [8, 16], "pgd_steps": 2, "targeted_items": 6},
    "schedule": {"extractor_epochs": 1, "rs_epochs": 2, "amr_epochs": 1, "denoiser_phase1_epochs": 1,
                 "denoiser_phase2_epochs": 1, "detector_epochs": 1, "joint_epochs": 1},
}


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete pipeline run on the tiny config; returns ``(config, run_dir, report)``."""
    from varsguard.config import RunConfig
    from varsguard.pipeline import run_pipeline

    cfg = RunConfig.from_dict(TINY)
    root = tmp_path_factory.mktemp("tiny") / "run"
    return cfg, root, run_pipeline(cfg, root)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
