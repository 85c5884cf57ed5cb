"""TOML run configuration.

Three tables, all optional; any absent key takes its dataclass default::

    [model]      # ViTConfig fields
    depth = 2

    [quant]      # w_bits, a_bits, calibration, ema_momentum
    w_bits = 4

    [pipeline]   # the remaining PipelineConfig fields
    alpha = 0.5

    [pipeline.augment]   # AugmentConfig fields
    flip_p = 0.0

Unknown tables or keys raise ``ConfigError`` naming the dotted key.
"""
from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import tomli

from .pipeline import AugmentConfig, ConfigError, PipelineConfig
from .vit import ViTConfig

QUANT_KEYS = ("w_bits", "a_bits", "calibration", "ema_momentum")
PIPELINE_KEYS = tuple(f.name for f in fields(PipelineConfig)
                      if f.name not in QUANT_KEYS and f.name != "augment")
MODEL_KEYS = tuple(f.name for f in fields(ViTConfig))
AUGMENT_KEYS = tuple(f.name for f in fields(AugmentConfig))


def _coerce(key: str, value: Any, default: Any) -> Any:
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is tuple:
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} numbers, got {value!r}")
        return tuple(_coerce(key, v, d) for v, d in zip(value, default))
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _take(table: Dict[str, Any], allowed, defaults, prefix: str) -> Dict[str, Any]:
    out = {}
    for key, value in table.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {prefix}{key}")
        out[key] = _coerce(prefix + key, value, getattr(defaults, key))
    return out


def parse_config(text: str) -> Tuple[ViTConfig, PipelineConfig]:
    """Parse TOML text into ``(ViTConfig, PipelineConfig)``."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        # tomli reports "(at line L, column C)", which names the offending line
        raise ConfigError(f"config parse error: {e}") from None
    for table in doc:
        if table not in ("model", "quant", "pipeline"):
            raise ConfigError(f"unknown config key {table}")
        if not isinstance(doc[table], dict):
            raise ConfigError(f"{table} must be a table")

    model_defaults, pipe_defaults = ViTConfig(), PipelineConfig()
    pipeline_table = dict(doc.get("pipeline", {}))
    augment_table = pipeline_table.pop("augment", {})
    if not isinstance(augment_table, dict):
        raise ConfigError("pipeline.augment must be a table")

    model_kw = _take(doc.get("model", {}), MODEL_KEYS, model_defaults, "model.")
    pipe_kw = _take(doc.get("quant", {}), QUANT_KEYS, pipe_defaults, "quant.")
    pipe_kw.update(_take(pipeline_table, PIPELINE_KEYS, pipe_defaults, "pipeline."))
    aug_kw = _take(augment_table, AUGMENT_KEYS, pipe_defaults.augment, "pipeline.augment.")
    try:
        model = ViTConfig(**model_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return model, PipelineConfig(**pipe_kw, augment=AugmentConfig(**aug_kw))


def load_config(path: Union[str, Path, None]) -> Tuple[ViTConfig, PipelineConfig]:
    if path is None:
        return ViTConfig(), PipelineConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def dump_config(model: ViTConfig, cfg: PipelineConfig) -> str:
    """Canonical TOML: every key, fixed table and key order."""
    lines = ["[model]"]
    lines += [f"{k} = {_fmt(getattr(model, k))}" for k in MODEL_KEYS]
    lines += ["", "[quant]"]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in QUANT_KEYS]
    lines += ["", "[pipeline]"]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in PIPELINE_KEYS]
    lines += ["", "[pipeline.augment]"]
    lines += [f"{k} = {_fmt(getattr(cfg.augment, k))}" for k in AUGMENT_KEYS]
    return "\n".join(lines) + "\n"


def with_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Replace the fields whose override is not ``None``."""
    given = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **given) if given else cfg
