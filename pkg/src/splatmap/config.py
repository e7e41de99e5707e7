"""Flat ``key = value`` configuration files.

Every field of the pipeline configuration has a flat key (MOHV fields carry a
``mohv_`` prefix). Values are typed by the default they replace: booleans
accept ``true``/``false``, tuples are comma separated.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError
from .pipeline import PipelineConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(text, default, path, lineno, key):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise ParseError(f"bad value {text!r} for {key}", path, lineno) from None
    return text


def parse_config_text(text, path=None) -> PipelineConfig:
    defaults = PipelineConfig.flat_keys()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {line!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ParseError(f"unknown key {key!r}", path, lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        values[key] = _coerce(value, defaults[key], path, lineno, key)
    try:
        return PipelineConfig.from_flat(values)
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ParseError("config file not found", path)
    return parse_config_text(path.read_text(encoding="utf-8"), path)


def format_config(cfg: PipelineConfig) -> str:
    """Render every key with its value; ``parse_config_text`` reads it back."""
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(repr(float(v)) for v in value)
        else:
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
