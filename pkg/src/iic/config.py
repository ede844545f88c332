"""Flat ``key = value`` config files mapped onto (nested) dataclasses.

Nested dataclass fields are addressed with dotted keys, e.g.
``encoder.stage_channels = 8, 16, 32``. Blank lines and ``#`` comments are
ignored. Tuples are comma-separated; ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import UsageError


def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise UsageError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, default):
    v = value.strip()
    if v.lower() == "none":
        return None
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple) or default is None and "," in v:
        items = [s.strip() for s in v.split(",") if s.strip()]
        proto = default[0] if default else None
        if isinstance(proto, str):
            return tuple(items)
        return tuple(_number(s) for s in items)
    if default is None:
        return _number(v) if _is_number(v) else v
    return v


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _number(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def from_dict(cls, values: dict, prefix: str = ""):
    """Instantiate dataclass `cls`, overriding defaults with string values."""
    default = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        cur = getattr(default, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(cur):
            sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
            kwargs[f.name] = from_dict(type(cur), sub, key + ".") if sub else cur
        elif key in values:
            try:
                kwargs[f.name] = _coerce(values[key], cur)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from exc
    known = set(flatten(default))
    unknown = [k for k in values if k.startswith(prefix) and k not in known]
    if unknown and not prefix:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if not f.init:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, prefix + f.name + "."))
        else:
            out[prefix + f.name] = v
    return out


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def dumps(obj) -> str:
    return "".join(f"{k} = {_render(v)}\n" for k, v in flatten(obj).items())


def load(cls, path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return from_dict(cls, parse_kv(text, str(path)))


def save(obj, path) -> None:
    Path(path).write_text(dumps(obj))
