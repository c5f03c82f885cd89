"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are coerced to the
type of the matching :class:`~mde.trainer.TrainConfig` field, so a typo'd
key or a non-numeric learning rate fails before any compute starts.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .models import ConfigError
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: str, key: str = "value") -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def coerce(key: str, text: str):
    types = field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    if kind is bool:
        return parse_bool(text, key)
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = coerce(key, value)
        except ConfigError as e:
            raise ConfigError(f"{origin}:{lineno}: {e}") from None
    return values


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, str(path))


def format_config(config: TrainConfig) -> str:
    """Round-trippable text for ``config``; every default is written out."""
    lines = []
    for k, v in config.as_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
