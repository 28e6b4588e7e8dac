"""Typed engine configuration: defaults < JSON file < MEMTREE_* env vars < CLI flags."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from memtree.gate import GateConfig, GateConfigError
from memtree.listener import ListenerConfig
from memtree.recall import RecallConfig

ENV_PREFIX = "MEMTREE_"

# env names that do not follow the MEMTREE_<SECTION>_<FIELD> pattern
ENV_ALIASES = {
    "MEMTREE_LLM_ENDPOINT": "listener.endpoint",
    "MEMTREE_LLM_API_KEY": "listener.api_key",
    "MEMTREE_LLM_MODEL": "listener.model",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    schema_path: str | None = None
    store_path: str = ".memtree"
    chunk_w: int = 3
    gate: GateConfig = field(default_factory=GateConfig)
    listener: ListenerConfig = field(default_factory=ListenerConfig)
    recall: RecallConfig = field(default_factory=RecallConfig)


# key -> (type, nullable); the type is what coercion targets
KEY_TYPES: dict[str, tuple[type, bool]] = {
    "schema_path": (str, True),
    "store_path": (str, False),
    "chunk_w": (int, False),
    "gate.schema_policy": (str, False),
    "gate.deletion_mode": (str, False),
    "gate.deletion_marker": (str, False),
    "gate.budget_override": (int, True),
    "gate.max_depth": (int, False),
    "listener.endpoint": (str, True),
    "listener.model": (str, False),
    "listener.api_key": (str, True),
    "listener.temperature": (float, False),
    "listener.top_p": (float, False),
    "listener.max_tokens": (int, False),
    "listener.strategy": (str, False),
    "listener.timeout": (float, False),
    "recall.expansions": (int, False),
    "recall.k": (int, False),
    "recall.fusion_limit": (int, False),
    "recall.fusion_budget": (int, False),
    "recall.router": (str, False),
}


def env_name(key: str) -> str:
    for alias, target in ENV_ALIASES.items():
        if target == key:
            return alias
    return ENV_PREFIX + key.upper().replace(".", "_")


_ENV_TO_KEY = {env_name(k): k for k in KEY_TYPES}


def defaults() -> dict[str, Any]:
    cfg = EngineConfig()
    out: dict[str, Any] = {}
    for key in KEY_TYPES:
        section, _, name = key.rpartition(".")
        obj = getattr(cfg, section) if section else cfg
        out[key] = getattr(obj, name)
    return out


def _check_type(key: str, value: Any) -> Any:
    typ, nullable = KEY_TYPES[key]
    if value is None:
        if nullable:
            return None
        raise ConfigError(f"{key}: may not be null")
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def _coerce_text(key: str, raw: str) -> Any:
    typ, nullable = KEY_TYPES[key]
    if nullable and raw.strip().lower() in ("", "none", "null"):
        return None
    if typ is str:
        return raw
    try:
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def _flatten(doc: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name, value in doc.items():
        key = f"{prefix}{name}"
        if isinstance(value, dict) and not any(k == key for k in KEY_TYPES):
            if not any(k.startswith(key + ".") for k in KEY_TYPES):
                raise ConfigError(f"{key}: unknown config section")
            out.update(_flatten(value, key + "."))
        else:
            if key not in KEY_TYPES:
                raise ConfigError(f"{key}: unknown config key")
            out[key] = _check_type(key, value)
    return out


def _build(values: Mapping[str, Any]) -> EngineConfig:
    sections: dict[str, dict[str, Any]] = {"": {}, "gate": {}, "listener": {}, "recall": {}}
    for key, value in values.items():
        section, _, name = key.rpartition(".")
        sections[section][name] = value
    try:
        gate = replace(GateConfig(), **sections["gate"])
        listener = replace(ListenerConfig(), **sections["listener"])
        recall = replace(RecallConfig(), **sections["recall"])
    except (GateConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = EngineConfig(gate=gate, listener=listener, recall=recall, **sections[""])
    if cfg.chunk_w < 1:
        raise ConfigError("chunk_w: must be at least 1")
    if cfg.schema_path is not None and not Path(cfg.schema_path).is_file():
        raise ConfigError(f"schema_path: no such file {cfg.schema_path!r}")
    return cfg


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> EngineConfig:
    """Resolve the engine configuration.

    ``flags`` maps dotted keys (``recall.k``) to values; strings are coerced
    like env values. Unknown keys anywhere are an error.
    """
    values = defaults()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(_flatten(doc))
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = _ENV_TO_KEY.get(name)
        if key is None:
            raise ConfigError(f"{name}: unknown environment setting")
        values[key] = _coerce_text(key, raw)
    for key, value in (flags or {}).items():
        if key not in KEY_TYPES:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _coerce_text(key, value) if isinstance(value, str) else _check_type(key, value)
    return _build(values)


def config_to_dict(cfg: EngineConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key in KEY_TYPES:
        section, _, name = key.rpartition(".")
        obj = getattr(cfg, section) if section else cfg
        out[key] = getattr(obj, name)
    return out

