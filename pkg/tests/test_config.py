import pytest

from conftest import ROOT
from core import config
from core.errors import ConfigError


def _write(tmp_path, text):
    path = tmp_path / "settings.yaml"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_shipped_settings_match_defaults():
    settings = config.load_settings(str(ROOT / "configs" / "settings.yaml"), env={})
    assert settings == config.DEFAULTS


def test_yaml_merges_over_defaults(tmp_path):
    path = _write(tmp_path, "cluster:\n  merge_threshold: 0.5\nenforce:\n  severity:\n    attribute: terminate\n")
    settings = config.load_settings(path, env={})
    assert settings["cluster"]["merge_threshold"] == 0.5
    assert settings["cluster"]["block_weights"]["numeric"] == 1.0
    assert settings["enforce"]["severity"] == {"flow": "terminate", "input_pattern": "terminate", "attribute": "terminate"}


def test_precedence_yaml_env_overrides(tmp_path):
    path = _write(tmp_path, "serve:\n  bind: 0.0.0.0:9000\n  fail_mode: open\n")
    env = {"GUARDIAN_BIND": "127.0.0.1:7000", "GUARDIAN_AGGREGATOR_TIMEOUT_MS": "500", "GUARDIAN_POLICY_DIR": ""}
    settings = config.load_settings(path, env=env, overrides={"serve": {"fail_mode": None, "bind": "localhost:1"}})
    assert settings["serve"]["bind"] == "localhost:1"
    assert settings["serve"]["fail_mode"] == "open"
    assert settings["aggregator"]["timeout_ms"] == 500
    assert settings["paths"]["policy_dir"] == "policies"


def test_defaults_are_not_mutated(tmp_path):
    settings = config.load_settings(_write(tmp_path, "{}\n"), env={})
    settings["cluster"]["block_weights"]["numeric"] = 9.0
    assert config.DEFAULTS["cluster"]["block_weights"]["numeric"] == 1.0


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        config.load_settings(str(tmp_path / "nope.yaml"), env={})


@pytest.mark.parametrize(
    "text, env, key",
    [
        ("serve:\n  fail_mode: sideways\n", {}, "serve.fail_mode"),
        ("enforce:\n  flow_mode: graph\n", {}, "enforce.flow_mode"),
        ("learn:\n  min_freq: 0\n", {}, "learn.min_freq"),
        ("{}\n", {"GUARDIAN_AGGREGATOR_TIMEOUT_MS": "soon"}, "GUARDIAN_AGGREGATOR_TIMEOUT_MS"),
        ("{}\n", {"GUARDIAN_AGGREGATOR_TIMEOUT_MS": "0"}, "aggregator.timeout_ms"),
        ("- a\n- b\n", {}, None),
    ],
)
def test_invalid_settings(tmp_path, text, env, key):
    path = _write(tmp_path, text)
    with pytest.raises(ConfigError) as err:
        config.load_settings(path, env=env)
    assert err.value.key == (key or path)


def test_flatten():
    flat = config.flatten({"a": {"b": 1, "c": {"d": "x"}}, "e": True})
    assert flat == {"a.b": 1, "a.c.d": "x", "e": True}
    assert config.flatten(config.DEFAULTS)["enforce.severity.attribute"] == "alert"


def test_ensure_directories(tmp_path):
    target = tmp_path / "out" / "nested"
    config.ensure_directories({"paths": {"outputs_dir": str(target)}})
    assert target.is_dir()
