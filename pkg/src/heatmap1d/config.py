"""Line-based ``key = value`` config files.

Blank lines and lines starting with ``#`` are ignored. Values are coerced to
the type of the key's default; list-valued keys take comma-separated items.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def coerce(raw: str, default: Any, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, tuple)):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ValueError(f"{key}: empty list")
        kind = type(default[0]) if default else float
        return [kind(s) for s in items]
    return raw


def parse_config(text: str, defaults: Mapping[str, Any], source: str = "<config>") -> dict[str, Any]:
    """Parse ``text`` against ``defaults``; returns a copy of defaults with overrides applied."""
    out = dict(defaults)
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, source)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, source)
        seen[key] = lineno
        try:
            out[key] = coerce(value, defaults[key], key)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, source) from None
    return out


def load_config(path: str | Path, defaults: Mapping[str, Any]) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("file not found", None, str(path)) from None
    return parse_config(text, defaults, str(path))


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())
