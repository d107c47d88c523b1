"""Plain-text ``key=value`` config files.

Blank lines and ``#`` comments are ignored. Keys are dataclass field names;
each key must belong to exactly one of the target dataclasses.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(raw: str, typ, where: str):
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {typ.__name__}, got {raw!r}") from None
    return raw


def parse_kv(text: str, source: str = "<config>") -> list[tuple[int, str, str]]:
    items = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        items.append((lineno, key, value))
    return items


def parse_config_text(text: str, *classes, source: str = "<config>"):
    """Build one instance per dataclass in ``classes`` from ``key=value`` text."""
    fields = {}
    for cls in classes:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            fields[f.name] = (cls, hints[f.name])
    kwargs: dict[type, dict] = {cls: {} for cls in classes}
    for lineno, key, value in parse_kv(text, source):
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        cls, typ = fields[key]
        kwargs[cls][key] = _coerce(value, typ, f"{source}:{lineno}")
    out = []
    for cls in classes:
        obj = cls(**kwargs[cls])
        if hasattr(obj, "validate"):
            obj.validate()
        out.append(obj)
    return out[0] if len(out) == 1 else tuple(out)


def load_config_file(path, *classes):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return parse_config_text(text, *classes, source=str(path))
