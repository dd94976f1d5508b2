"""Config parsing, validation, and hashing."""

import pytest

from fedsim.config import (ConfigError, ExperimentConfig, config_hash,
                           load_config, write_config)


def test_defaults_are_valid():
    config = ExperimentConfig()
    config.validate()
    assert config.run.method == "fedrio"
    assert config.run.num_clients == 10
    assert config.run.rounds == 100
    assert config.client.local_epochs == 5
    assert config.agent.learning_rate == 5e-4
    assert config.reward.discount == 0.99


@pytest.mark.parametrize("field,value", [
    ("method", "sgd"),
    ("num_clients", 1),
    ("rounds", 0),
    ("alpha", 0.0),
    ("mu_prox", -0.1),
])
def test_validate_rejects_bad_run_values(field, value):
    config = ExperimentConfig()
    setattr(config.run, field, value)
    with pytest.raises(ConfigError):
        config.validate()


def test_roundtrip_through_file(tmp_path):
    config = ExperimentConfig()
    config.run.num_clients = 4
    config.run.alpha = 0.1
    config.run.disable_rl = True
    config.client.local_epochs = 3
    config.agent.warmup_rounds = 2
    path = str(tmp_path / "config.ini")
    write_config(config, path)
    loaded = load_config(path)
    assert loaded.to_dict() == config.to_dict()


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.ini"))


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[telemetry]\nenabled = true\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(str(path))


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nmethod = fedavg\nturbo = yes\n")
    with pytest.raises(ConfigError, match="unknown key 'turbo'"):
        load_config(str(path))


def test_feature_dim_not_settable_from_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[backbone]\nfeature_dim = 99\n")
    with pytest.raises(ConfigError, match="feature_dim"):
        load_config(str(path))


@pytest.mark.parametrize("text,value", [
    ("true", True), ("yes", True), ("1", True), ("on", True),
    ("false", False), ("no", False), ("0", False), ("off", False),
])
def test_boolean_spellings(tmp_path, text, value):
    path = tmp_path / "c.ini"
    path.write_text(f"[run]\ndisable_rl = {text}\n")
    assert load_config(str(path)).run.disable_rl is value


def test_bad_boolean_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\ndisable_rl = maybe\n")
    with pytest.raises(ConfigError, match="expected a boolean"):
        load_config(str(path))


def test_bad_int_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nrounds = soon\n")
    with pytest.raises(ConfigError, match="expected int"):
        load_config(str(path))


def test_hash_ignores_key_order(tmp_path):
    a = tmp_path / "a.ini"
    b = tmp_path / "b.ini"
    a.write_text("[run]\nrounds = 5\nmethod = fedavg\n"
                 "[client]\nbatch_size = 16\n")
    b.write_text("[client]\nbatch_size = 16\n"
                 "[run]\nmethod = fedavg\nrounds = 5\n")
    assert config_hash(load_config(str(a))) == config_hash(load_config(str(b)))


def test_hash_sensitive_to_values(tmp_path):
    a = tmp_path / "a.ini"
    b = tmp_path / "b.ini"
    a.write_text("[run]\nrounds = 5\n")
    b.write_text("[run]\nrounds = 6\n")
    assert config_hash(load_config(str(a))) != config_hash(load_config(str(b)))


def test_invalid_file_values_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nnum_clients = 1\n")
    with pytest.raises(ConfigError, match="num_clients"):
        load_config(str(path))
