"""Flat TOML config files for training and experiments.

A file is one top-level table of ``key = value`` pairs. Keys belong to
:class:`navlab.trainer.TrainConfig` or, for experiment runs, to an extra
dataclass supplied by the caller. Unknown keys, wrong types, duplicated keys
and out-of-range values are errors that name the key (and line, when known).
"""
from __future__ import annotations

import dataclasses
import re
import typing
from pathlib import Path
from typing import Any

import tomli

from navlab.errors import ConfigError
from navlab.trainer import TrainConfig


def _line_of(text: str, key: str) -> int | None:
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, flags=re.MULTILINE)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(source: str, text: str, key: str) -> str:
    line = _line_of(text, key)
    return f"{source}:{line}" if line else source


def _coerce(key: str, value: Any, type_str: str, where: str) -> Any:
    def bad(expected: str) -> ConfigError:
        return ConfigError(f"{where}: key '{key}' expects {expected}, got {type(value).__name__} {value!r}")

    t = type_str.replace(" ", "")
    if t == "bool":
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if t == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if t in ("list[int]", "tuple[int,...]"):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise bad("a list of integers")
        return tuple(value) if t.startswith("tuple") else list(value)
    raise ConfigError(f"{where}: key '{key}' has unsupported type {type_str}")


def _schema(cls) -> dict[str, str]:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        h = hints[f.name]
        out[f.name] = getattr(h, "__name__", None) if h in (int, float, str, bool) else str(h).replace("typing.", "")
    return out


def parse_config_text(text: str, source: str = "<config>", extra: type | None = None):
    """Parse config text into ``TrainConfig`` (and an ``extra`` dataclass).

    Returns the ``TrainConfig`` alone when ``extra`` is None, otherwise the
    pair ``(TrainConfig, extra_instance)``.
    """
    seen: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*([A-Za-z0-9_\-]+)\s*=", line)
        if m:
            if m.group(1) in seen:
                raise ConfigError(f"{source}:{n}: duplicate key '{m.group(1)}' (first set on line {seen[m.group(1)]})")
            seen[m.group(1)] = n
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    train_schema = _schema(TrainConfig)
    extra_schema = _schema(extra) if extra is not None else {}
    train_kw, extra_kw = {}, {}
    for key, value in raw.items():
        where = _where(source, text, key)
        if isinstance(value, dict):
            raise ConfigError(f"{where}: tables are not allowed ('{key}'); use flat key = value pairs")
        if key in train_schema:
            train_kw[key] = _coerce(key, value, train_schema[key], where)
        elif key in extra_schema:
            extra_kw[key] = _coerce(key, value, extra_schema[key], where)
        else:
            raise ConfigError(f"{where}: unknown config key '{key}'")
    cfg = TrainConfig(**train_kw)
    try:
        cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(" ", 1)[0]
        raise ConfigError(f"{_where(source, text, key)}: {exc}") from None
    if extra is None:
        return cfg
    ext = extra(**extra_kw)
    if hasattr(ext, "validate"):
        try:
            ext.validate()
        except ConfigError as exc:
            key = str(exc).split(" ", 1)[0]
            raise ConfigError(f"{_where(source, text, key)}: {exc}") from None
    return cfg, ext


def parse_config(path: str | Path, extra: type | None = None):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p), extra)


def config_to_text(*objs) -> str:
    """Effective config as flat TOML (echoed by the CLI, stored in manifests)."""
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, str):
                s = f'"{v}"'
            elif isinstance(v, (list, tuple)):
                s = "[" + ", ".join(str(x) for x in v) + "]"
            else:
                s = repr(v)
            lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"
