import pytest
import yaml

from varsguard.config import FULL_SCALE_SCHEDULE, ConfigError, RunConfig, apply_override


def test_defaults_hold_loss_weights():
    cfg = RunConfig()
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.xi, cfg.loss.tau) == (1.0, 100.0, 0.1, 0.1)
    assert cfg.model.z_dim == 128 and cfg.attack.epsilons == [8, 16, 32, 64]
    assert cfg.eval.negatives_per_user == 100 and cfg.eval.ns == [5, 10, 20]


def test_yaml_roundtrip(tmp_path):
    cfg = RunConfig.from_dict({"seed": 4, "loss": {"beta": 50}, "ablation": {"disable_perceptual": True}})
    p = tmp_path / "c.yaml"
    p.write_text(cfg.to_yaml())
    back = RunConfig.load(p)
    assert back == cfg and back.digest() == cfg.digest()
    assert isinstance(back.loss.beta, float)


@pytest.mark.parametrize("raw, field", [
    ({"bogus": 1}, "bogus"),
    ({"loss": {"gamma": 1}}, "loss.gamma"),
    ({"loss": {"beta": -1}}, "loss.beta"),
    ({"loss": {"tau": 0}}, "loss.tau"),
    ({"data": {"interactions_per_user": 4}}, "data.interactions_per_user"),
    ({"data": {"source": "ingest"}}, "data.interactions_path"),
    ({"attack": {"methods": ["cw"]}}, "attack.methods"),
    ({"seed": "zero"}, "seed"),
    ({"schedule": {"rs_epochs": 2.5}}, "schedule.rs_epochs"),
    ({"randomization": {"enabled": "yes"}}, "randomization.enabled"),
    ({"eval": {"ns": [5, 500]}}, "eval.negatives_per_user"),
    ({"model": "big"}, "model"),
    ({"profile": "cluster"}, "profile"),
])
def test_field_level_errors(raw, field):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(raw)
    assert err.value.field == field


def test_overrides():
    raw = {}
    apply_override(raw, "loss.beta=25")
    apply_override(raw, "attack.epsilons=[8, 16]")
    apply_override(raw, "ablation.disable_randomization=true")
    cfg = RunConfig.from_dict(raw)
    assert cfg.loss.beta == 25.0 and cfg.attack.epsilons == [8, 16] and cfg.ablation.disable_randomization
    with pytest.raises(ConfigError):
        apply_override({}, "loss.beta")
    with pytest.raises(ConfigError):
        apply_override({"seed": 1}, "seed.x=2")


def test_load_applies_overrides_over_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"loss": {"beta": 10}}))
    assert RunConfig.load(p, ["loss.beta=20"]).loss.beta == 20.0
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_full_scale_profile():
    cfg = RunConfig.from_dict({"profile": "paper", "schedule": {"rs_epochs": 7}})
    assert cfg.schedule.rs_epochs == 7
    assert cfg.schedule.denoiser_lr == FULL_SCALE_SCHEDULE["denoiser_lr"]
    assert cfg.schedule.denoiser_phase1_epochs == 10 and cfg.schedule.denoiser_phase2_epochs == 3


def test_section_digests():
    a, b = RunConfig(), RunConfig.from_dict({"loss": {"beta": 1}})
    assert a.digest("data", "model") == b.digest("data", "model")
    assert a.digest("loss") != b.digest("loss")
