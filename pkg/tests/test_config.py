import math

import pytest

from faceprior.config import ConfigError, TrainConfig, config_from_mapping, load_config
from faceprior.losses import LossWeights


def test_reference_presets():
    rf = TrainConfig.reference("rf")
    assert (rf.lr_generator, rf.batch_size, rf.fixed_T, rf.p_clean) == (5e-5, 1, 750, 0.5)
    assert rf.weights == LossWeights(0.02, 0.0, 1.0, 1.0)
    eps = TrainConfig.reference("epsilon")
    assert (eps.lr_generator, eps.batch_size, eps.fixed_T) == (2e-4, 2, 399)
    assert eps.weights == LossWeights(5e-3, 0.5, 1.0, 2.0)


def test_discriminator_conditioning_default_follows_regime():
    assert TrainConfig.toy("epsilon").disc_conditioned is True
    assert TrainConfig.toy("rf").disc_conditioned is False
    assert TrainConfig.toy("rf", disc_conditioned=True).disc_conditioned is True


@pytest.mark.parametrize("kw", [
    {"regime": "ddim"}, {"steps": -1}, {"batch_size": 0}, {"p_clean": 1.5}, {"lr_generator": -1.0},
    {"restorer": "gfpgan"}, {"update_order": "random"}, {"lr_schedule": "step"},
])
def test_invalid_fields_rejected(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_digest_tracks_content():
    a, b = TrainConfig.toy("rf"), TrainConfig.toy("rf")
    assert a.digest() == b.digest()
    assert a.digest() != TrainConfig.toy("rf", seed=1).digest()


def test_lr_factor_constant_and_cosine():
    c = TrainConfig.toy("rf", steps=100)
    assert all(c.lr_factor(s) == 1.0 for s in (1, 50, 100))
    w = TrainConfig.toy("rf", steps=100, lr_warmup=10)
    assert w.lr_factor(5) == pytest.approx(0.5)
    assert w.lr_factor(10) == 1.0
    cos = TrainConfig.toy("rf", steps=100, lr_schedule="cosine")
    assert cos.lr_factor(1) == pytest.approx(1.0)
    assert cos.lr_factor(51) == pytest.approx(0.5)
    assert cos.lr_factor(100) == pytest.approx(0.5 * (1 + math.cos(math.pi * 99 / 100)))


def test_mapping_round_trip():
    cfg = config_from_mapping({"preset": "reference", "regime": "rf", "steps": 10, "recipe": {"blur_sigma": [0.5, 1.0]}})
    assert cfg.steps == 10 and cfg.fixed_T == 750
    assert cfg.recipe.blur_sigma == (0.5, 1.0)


def test_bad_preset_and_types(tmp_path):
    with pytest.raises(ConfigError, match="preset"):
        config_from_mapping({"preset": "huge"})
    with pytest.raises(ConfigError, match="steps"):
        config_from_mapping({"steps": 2.5})
    with pytest.raises(ConfigError, match="train_encoder"):
        config_from_mapping({"train_encoder": 1})
    with pytest.raises(ConfigError, match="top level"):
        config_from_mapping([1, 2])


def test_range_must_be_pair(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("regime: rf\nrecipe:\n  blur_sigma: [0.1, 0.2, 0.3]\n")
    with pytest.raises(ConfigError, match=r"recipe.blur_sigma.*line 3"):
        load_config(p)


def test_semantic_error_reports_line(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("regime: rf\n\np_clean: 2.0\n")
    with pytest.raises(ConfigError, match=r"p_clean.*line 3"):
        load_config(p)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name, regime in (("toy_epsilon.yaml", "epsilon"), ("toy_rf.yaml", "rf")):
        cfg = load_config(root / name)
        assert cfg.regime == regime and cfg.steps == 500 and cfg.image_size == 64
