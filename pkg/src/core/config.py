"""
Config loader: merges in-code defaults, configs/settings.yaml, GUARDIAN_*
environment variables and command-line overrides (in that order of increasing
precedence), and creates output directories on demand.
"""
import copy
import os
import pathlib
from typing import Any, Dict, Iterable, Mapping, Optional

import yaml

from core.errors import ConfigError


DEFAULT_SETTINGS_PATH = "configs/settings.yaml"

DEFAULTS: Dict[str, Any] = {
    "paths": {
        "traces": "data/fixtures/staging_traces.jsonl",
        "policy_dir": "policies",
        "outputs_dir": "outputs",
    },
    "learn": {"min_freq": 1},
    "embed": {
        "token_cap": 32768,
        "idle_cap_ms": 600000,
        "processing_cap_ms": 3600000,
        "timezone_offset_minutes": 0,
    },
    "cluster": {
        "merge_threshold": 0.35,
        "min_cluster_size_for_rule": 1,
        "block_weights": {
            "numeric": 1.0,
            "thoughts": 1.0,
            "tool_type": 1.0,
            "tool_input": 1.0,
            "task_result": 1.0,
        },
    },
    "rules": {
        "draft_threshold": 0.4,
        "max_patterns": 6,
        "max_alternatives": 4,
        "min_class_evidence": 20,
    },
    "aggregator": {"name": "none", "endpoint": "", "timeout_ms": 30000},
    "enforce": {
        "flow_mode": "path",
        "attribute_slack_factor": 2.0,
        "time_constraints_exempt_from_slack": True,
        "unknown_tool": "terminate",
        "severity": {"flow": "terminate", "input_pattern": "terminate", "attribute": "alert"},
    },
    "serve": {"bind": "127.0.0.1:8080", "fail_mode": "closed", "prefix_ttl_s": 3600},
    "eval": {
        "scenarios_dir": "configs/scenarios",
        "staging_fraction": 0.6,
        "hallucination_rate": 0.1,
        "probe_count": 10000,
        "probe_length": 20,
    },
}

# GUARDIAN_* variable -> (section, key, caster)
ENV_VARS = {
    "GUARDIAN_POLICY_DIR": ("paths", "policy_dir", str),
    "GUARDIAN_BIND": ("serve", "bind", str),
    "GUARDIAN_FAIL_MODE": ("serve", "fail_mode", str),
    "GUARDIAN_AGGREGATOR_ENDPOINT": ("aggregator", "endpoint", str),
    "GUARDIAN_AGGREGATOR_TIMEOUT_MS": ("aggregator", "timeout_ms", int),
}


def load_settings(
    path: Optional[str] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    loaded: Dict[str, Any] = {}
    if path is not None:
        cfg_path = pathlib.Path(path)
        if not cfg_path.exists():
            raise FileNotFoundError(f"Config file not found: {cfg_path}")
        loaded = _read_yaml(cfg_path)
    elif pathlib.Path(DEFAULT_SETTINGS_PATH).exists():
        loaded = _read_yaml(pathlib.Path(DEFAULT_SETTINGS_PATH))

    settings = _merge(DEFAULTS, loaded)
    settings = _merge(settings, _from_env(os.environ if env is None else env))
    if overrides:
        settings = _merge(settings, _drop_none(overrides))
    _validate(settings)
    return settings


def ensure_directories(settings: Dict[str, Any], keys: Iterable[str] = ("outputs_dir",)) -> None:
    paths = settings.get("paths", {})
    for key in keys:
        value = paths.get(key)
        if value:
            pathlib.Path(value).mkdir(parents=True, exist_ok=True)


def flatten(settings: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Dotted-key view of the effective settings, for `inspect config`."""
    flat: Dict[str, Any] = {}
    for key in sorted(settings):
        value = settings[key]
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _read_yaml(cfg_path: pathlib.Path) -> Dict[str, Any]:
    with cfg_path.open("r", encoding="utf-8") as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(str(cfg_path), "top level must be a mapping")
    return loaded


def _from_env(env: Mapping[str, str]) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for var, (section, key, caster) in ENV_VARS.items():
        raw = env.get(var)
        if raw is None or raw == "":
            continue
        try:
            value = caster(raw)
        except ValueError as exc:
            raise ConfigError(var, f"cannot parse {raw!r}: {exc}") from exc
        result.setdefault(section, {})[key] = value
    return result


def _drop_none(overrides: Dict[str, Any]) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            nested = _drop_none(value)
            if nested:
                result[key] = nested
        elif value is not None:
            result[key] = value
    return result


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for key, value in base.items():
        if key in override:
            if isinstance(value, dict) and isinstance(override[key], dict):
                result[key] = _merge(value, override[key])
            else:
                result[key] = copy.deepcopy(override[key])
        else:
            result[key] = copy.deepcopy(value)

    for key, value in override.items():
        if key not in result:
            result[key] = copy.deepcopy(value)
    return result


def _validate(settings: Dict[str, Any]) -> None:
    if settings["serve"]["fail_mode"] not in ("closed", "open"):
        raise ConfigError("serve.fail_mode", "must be 'closed' or 'open'")
    if settings["enforce"]["flow_mode"] not in ("path", "edge"):
        raise ConfigError("enforce.flow_mode", "must be 'path' or 'edge'")
    if int(settings["learn"]["min_freq"]) < 1:
        raise ConfigError("learn.min_freq", "must be >= 1")
    if int(settings["aggregator"]["timeout_ms"]) <= 0:
        raise ConfigError("aggregator.timeout_ms", "must be > 0")
