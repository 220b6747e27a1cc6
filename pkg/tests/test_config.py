"""Tests for configuration loading."""

import pytest
import yaml

from twinsieve.config import Config, load_config, parse_address
from twinsieve.errors import ConfigurationError
from twinsieve.mpc.field import DEFAULT_PRIME


@pytest.fixture(autouse=True)
def isolated(monkeypatch, tmp_path):
    """No config file or overrides leak in from the environment."""
    for name in ("TWINSIEVE_CONFIG", "TWINSIEVE_PARTY", "TWINSIEVE_LISTEN", "TWINSIEVE_PEER", "TWINSIEVE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def test_default_config():
    """Default config has the documented protocol defaults."""
    config = Config()
    assert config.params.p == DEFAULT_PRIME == 2**64 - 59
    assert (config.params.f, config.params.f_doc, config.params.n, config.params.lam) == (32, 30, 64, 128)
    assert config.protocol.truncate_bits == 0
    assert config.server.party == 0
    assert len(config.client.endpoints) == 2


def test_load_missing_config_uses_defaults():
    """Loading with no config file returns defaults."""
    config = load_config()
    assert isinstance(config, Config)
    assert config.log_level == "INFO"


def test_load_config_from_yaml(tmp_path):
    """Loading from a YAML file merges with defaults."""
    data = {
        "protocol": {"step_m": 12, "c_m": 64},
        "server": {"party": 1, "listen": "0.0.0.0:9000", "peer_timeout": 5},
        "client": {"timeout": 30},
    }
    path = tmp_path / "custom.yaml"
    path.write_text(yaml.safe_dump(data))
    config = load_config(path)
    assert config.protocol.step_m == 12 and config.protocol.c_m == 64
    assert config.server.party == 1 and config.server.peer_timeout == 5.0
    assert config.client.timeout == 30.0
    assert config.protocol.xi == 16


def test_config_yaml_in_working_directory(tmp_path):
    """A config.yaml in the working directory is picked up."""
    (tmp_path / "config.yaml").write_text("log_level: DEBUG\n")
    assert load_config().log_level == "DEBUG"


def test_env_overrides(monkeypatch):
    """Environment variables override the file."""
    monkeypatch.setenv("TWINSIEVE_PARTY", "1")
    monkeypatch.setenv("TWINSIEVE_PEER", "10.0.0.2:7500")
    monkeypatch.setenv("TWINSIEVE_LOG_LEVEL", "WARNING")
    config = load_config()
    assert config.server.party == 1
    assert config.server.peer == "10.0.0.2:7500"
    assert config.log_level == "WARNING"


def test_bad_party_env(monkeypatch):
    monkeypatch.setenv("TWINSIEVE_PARTY", "one")
    with pytest.raises(ConfigurationError):
        load_config()


@pytest.mark.parametrize(
    "data",
    [
        {"protocol": {"step_m": 0}},
        {"protocol": {"xi": -1}},
        {"server": {"party": 2}},
        {"params": {"p": 100}},
        {"dealer": {"queries": 0}},
        {"unknown_section": {}},
        {"server": {"workers": "many"}},
    ],
)
def test_invalid_values(tmp_path, data):
    """Invalid or unknown values are configuration errors."""
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(data))
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_missing_explicit_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.yaml")


def test_server_config_party_override():
    """An explicit party replaces the file value without mutating it."""
    config = Config()
    assert config.server_config(1).party == 1
    assert config.server.party == 0
    with pytest.raises(ConfigurationError):
        config.server_config(5)


def test_parse_address():
    assert parse_address("10.1.2.3:7400") == ("10.1.2.3", 7400)
    assert parse_address("7400") == ("127.0.0.1", 7400)
    assert parse_address(":7400") == ("127.0.0.1", 7400)
    with pytest.raises(ConfigurationError):
        parse_address("host:port")
