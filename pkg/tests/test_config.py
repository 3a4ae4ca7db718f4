import pytest

from vecmap.config import ExperimentConfig, load_config, merge, replace, save_config
from vecmap.synth import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = ExperimentConfig().validate()
    assert cfg.querygen.embed_dim == 128 and cfg.querygen.num_instance_queries == 50
    assert cfg.decoder.num_layers == 4 and cfg.decoder.num_groups == 3
    assert cfg.data.num_train == 200 and cfg.data.num_val == 60
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").config_hash() == cfg.config_hash()


def test_hashes():
    cfg = ExperimentConfig()
    assert replace(cfg, output_dir="elsewhere").config_hash() == cfg.config_hash()
    assert replace(cfg, seed=1).config_hash() != cfg.config_hash()
    assert replace(cfg, optim={"lr": 1.0}).model_hash() == cfg.model_hash()
    assert replace(cfg, querygen={"embed_dim": 64}).model_hash() != cfg.model_hash()


def test_invalid_values_raise(tmp_path):
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), querygen={"p_single": 1.5}).validate()
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), querygen={"embed_dim": 30}).validate()
    with pytest.raises(ConfigError):
        load_config(None, {"querygen": {"k_prev": -1}})


def test_merge_is_deep():
    assert merge({"a": {"b": 1, "c": 2}}, {"a": {"c": 3}}) == {"a": {"b": 1, "c": 3}}
