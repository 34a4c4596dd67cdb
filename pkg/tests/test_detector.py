import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import rel_errors
from varsguard.attacks import AttackConfig, attack_catalog
from varsguard.denoiser import DenoiserNet, DenoiserSchedule, train_denoiser
from varsguard.detector import (ADV, ADV_DE, CLEAN, CLEAN_DE, NEGATIVE_PAIRS, POSITIVE_PAIRS, ContrastiveConfig,
                                DetectorEncoder, DetectorError, DetectorSchedule, build_pairs, calibrate_threshold,
                                contrastive_loss, contrastive_loss_from_embeddings, decide, detection_distances,
                                dissimilarity, embed, noisy_copy, train_detector)
from varsguard.evaluation import auc
from varsguard.vision import FeatureExtractor


def small_encoder(seed=0, normalize=True):
    return DetectorEncoder(FeatureExtractor((4, 8, 8, 8), image_side=16, seed=seed), hidden=16, z_dim=8,
                           normalize=normalize, seed=seed)


def test_pair_memberships():
    (ps,) = build_pairs([("c", "a", "cd", "ad")], items=[7])
    assert ps.item == 7
    assert len(ps.positives) == 3 and len(ps.negatives) == 3
    named = ps.named()
    assert set(named["positive"]) == {("clean", "clean_de"), ("clean", "adv_de"), ("clean_de", "adv_de")}
    assert set(named["negative"]) == {("adv", "clean"), ("adv", "adv_de"), ("clean_de", "adv")}
    assert (CLEAN_DE, ADV_DE) in ps.positives and (CLEAN_DE, ADV) in ps.negatives
    assert all(a != b for a, b in ps.positives + ps.negatives)
    assert {a for p in ps.positives + ps.negatives for a in p} <= {CLEAN, ADV, CLEAN_DE, ADV_DE}


def test_incomplete_quadruple():
    with pytest.raises(DetectorError):
        build_pairs([("c", "a", "cd")])
    with pytest.raises(DetectorError):
        build_pairs([("c", None, "cd", "ad")])


def test_loss_equal_embeddings_is_ln2():
    z = torch.randn(1, 1, 16).expand(5, 4, 16)
    assert contrastive_loss_from_embeddings(z, 0.1).item() == pytest.approx(math.log(2), abs=1e-5)
    # equal pair similarities without equal embeddings: a regular simplex has all cosines equal
    simplex = torch.eye(4) - 0.25
    assert contrastive_loss_from_embeddings(simplex[None], 0.3).item() == pytest.approx(math.log(2), abs=1e-5)


@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
@settings(max_examples=50, deadline=None)
def test_loss_nonnegative(seed, tau):
    z = torch.randn(3, 4, 6, generator=torch.Generator().manual_seed(seed))
    assert contrastive_loss_from_embeddings(z, tau).item() >= 0


def test_loss_limit():
    # positives at cosine 0.999, negatives at -0.999: clean, clean_de and adv_de close; adv opposite
    e = torch.tensor([1.0, 0.0])
    tilt = torch.tensor([math.cos(0.0447), math.sin(0.0447)])
    z = torch.stack([e, -e, tilt, tilt])[None]
    assert contrastive_loss_from_embeddings(z, 0.05).item() < 1e-15


def test_loss_matches_brute_force():
    z = torch.randn(2, 4, 5, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    tau = 0.3
    want = []
    for q in z:
        sim = lambda a, b: (q[a] @ q[b] / (q[a].norm() * q[b].norm())).item()
        pos = sum(math.exp(sim(a, b) / tau) for a, b in POSITIVE_PAIRS)
        neg = sum(math.exp(sim(a, b) / tau) for a, b in NEGATIVE_PAIRS)
        want.append(-math.log(pos / (pos + neg)))
    assert contrastive_loss_from_embeddings(z, tau).item() == pytest.approx(np.mean(want), abs=1e-12)


def test_loss_errors():
    with pytest.raises(DetectorError):
        contrastive_loss_from_embeddings(torch.zeros(2, 4, 3), 0.0)
    with pytest.raises(DetectorError):
        contrastive_loss_from_embeddings(torch.zeros(2, 3, 3), 0.1)
    with pytest.raises(DetectorError):
        contrastive_loss_from_embeddings(torch.zeros(0, 4, 3), 0.1)
    with pytest.raises(DetectorError):
        ContrastiveConfig(temperature=-1)


def test_contrastive_gradient_embeddings():
    z = torch.randn(3, 4, 8, generator=torch.Generator().manual_seed(0))
    f = lambda t: contrastive_loss_from_embeddings(t, 0.1)
    assert rel_errors(f, f, z, n=20).max() < 1e-3


def test_contrastive_gradient_images():
    enc = small_encoder(2)
    with torch.no_grad():
        enc.backbone.train()
        enc.backbone(torch.rand(16, 3, 16, 16))
    enc.eval()
    enc64 = copy.deepcopy(enc).double()
    cfg = ContrastiveConfig(0.1, 8)
    quads = torch.rand(2, 4, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    errs = rel_errors(lambda q: contrastive_loss(enc, q, cfg), lambda q: contrastive_loss(enc64, q, cfg), quads, n=20)
    assert errs.max() < 1e-3


def test_embedding_properties():
    enc = small_encoder()
    x = torch.rand(3, 3, 16, 16)
    z = embed(enc, x)
    assert torch.allclose(z.norm(dim=1), torch.ones(3), atol=1e-6)
    assert torch.equal(embed(enc, x), z)
    assert embed(enc, x[0]).shape == (8,)
    with torch.no_grad():
        for p in enc.head.parameters():
            p.zero_()
    with pytest.raises(DetectorError):
        embed(enc, x)
    raw = small_encoder(normalize=False)
    assert not torch.allclose(embed(raw, x).norm(dim=1), torch.ones(3))


def test_dissimilarity_pseudometric():
    enc = small_encoder(1)
    g = torch.Generator().manual_seed(0)
    a, b, c = (torch.rand(4, 3, 16, 16, generator=g) for _ in range(3))
    dab = dissimilarity(enc, a, b)
    assert torch.equal(dissimilarity(enc, a, a), torch.zeros(4))
    assert torch.allclose(dab, dissimilarity(enc, b, a))
    assert (dab >= 0).all() and (dab <= 2 + 1e-6).all()
    assert (dab <= dissimilarity(enc, a, c) + dissimilarity(enc, c, b) + 1e-6).all()


def test_decide():
    assert decide(0.05, 0.2).verdict == "clean"
    assert decide(0.5, 0.2).adversarial
    assert decide(0.2, 0.2).verdict == "clean"
    with pytest.raises(DetectorError):
        decide(-0.1, 0.2)


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_decide_monotone(d1, d2, theta):
    lo, hi = sorted((d1, d2))
    if decide(lo, theta).adversarial:
        assert decide(hi, theta).adversarial


def test_calibration_examples():
    clean = np.linspace(0.01, 0.1, 10)
    adv = np.linspace(0.3, 0.9, 10)
    theta, roc = calibrate_threshold(clean, adv)
    assert 0.1 < theta < 0.3
    assert auc(roc) == 1.0
    assert any(f == 0 and t == 1 for f, t, _ in roc)
    rng = np.random.default_rng(0)
    aucs = [auc(calibrate_threshold(rng.random(200), rng.random(200))[1]) for _ in range(20)]
    assert abs(np.mean(aucs) - 0.5) < 0.03
    with pytest.raises(DetectorError):
        calibrate_threshold([], [0.1])


def test_calibration_maximises_youden():
    rng = np.random.default_rng(1)
    clean, adv = rng.normal(0.2, 0.1, 50), rng.normal(0.5, 0.15, 50)
    theta, _ = calibrate_threshold(clean, adv)
    j = lambda t: (adv > t).mean() - (clean > t).mean()
    grid = np.concatenate([clean, adv])
    assert j(theta) >= max(j(t) for t in grid) - 1e-12


def test_noisy_copy():
    x = torch.full((4, 3, 8, 8), 0.5)
    y = noisy_copy(x, 64 / 255, np.random.default_rng(0))
    assert y.min() >= 0 and y.max() <= 1 and not torch.equal(x, y)
    assert torch.equal(noisy_copy(x, 0.0, np.random.default_rng(0)), x)


def test_requires_denoiser(world):
    with pytest.raises(DetectorError):
        train_detector(small_encoder(), None, world.store.images, world.store.images, [0],
                       ContrastiveConfig(z_dim=8), DetectorSchedule())


def test_checkpoint_roundtrip(tmp_path):
    enc = small_encoder(4)
    enc.save(tmp_path / "e.safetensors", {"threshold": 0.3})
    back, cfg = DetectorEncoder.load(tmp_path / "e.safetensors")
    assert cfg["threshold"] == 0.3 and cfg["z_dim"] == 8
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(embed(back, x), embed(enc, x))


def test_training_separates_pairs(world):
    """Train on 100 items, check held-out distance statistics."""
    items = np.arange(world.store.num_items)
    clean = world.store.images
    cats = {m: attack_catalog(world.model, world.fe, world.split.train, world.store, AttackConfig(m, 16), items)
            .full_catalog(clean) for m in ("fgsm", "pgd")}
    den = DenoiserNet(width=16, n_res=3, n_trailing=1)
    train_denoiser(den, world.fe, clean, cats, items[:100], DenoiserSchedule(phase1_epochs=3, phase2_epochs=1))
    enc = DetectorEncoder(copy.deepcopy(world.fe), hidden=32, z_dim=16)
    for p in enc.backbone.parameters():
        p.requires_grad_(True)
    enc.backbone.frozen = False
    logs = []
    train_detector(enc, den, clean, cats["fgsm"], items[:100], ContrastiveConfig(0.1, 16),
                   DetectorSchedule(epochs=4), log=logs.append)
    assert logs[-1]["loss"] < logs[0]["loss"]
    held = items[100:]
    d_clean = detection_distances(enc, den, torch.as_tensor(clean[held]))
    d_adv = detection_distances(enc, den, torch.as_tensor(cats["fgsm"][held]))
    assert d_clean.mean() < d_adv.mean()
