"""Flat, typed key-value configuration handling.

Config files mirror the dataclass field names exactly, one dotted key
per line::

    encoder.backbone = windowed-t
    encoder.patch_size = 256
    bottleneck.depth = 2
    bottleneck.approx.block_size = 64

Precedence everywhere is defaults < file < explicit overrides. Unknown
keys are rejected with the nearest valid names.
"""

from __future__ import annotations

import dataclasses
import difflib
import types
import typing

from .errors import ConfigError

_UNION_ORIGINS = (typing.Union, types.UnionType)

_NONE_WORDS = {"none", "null", ""}
_TRUE_WORDS = {"true", "1", "yes", "on"}
_FALSE_WORDS = {"false", "0", "no", "off"}


def _type_hints(cls) -> dict:
    return typing.get_type_hints(cls)


def to_flat(obj, prefix: str = "") -> dict[str, object]:
    """Flatten a dataclass (possibly nested) into dotted keys."""
    out: dict[str, object] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, prefix=f"{key}."))
        else:
            out[key] = value
    return out


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce_scalar(text: str, target):
    if target is bool:
        low = text.strip().lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise ConfigError(f"cannot parse {text!r} as a boolean")
    if target is int:
        return int(text)
    if target is float:
        return float(text)
    if target is str:
        return text
    raise ConfigError(f"unsupported config value type {target!r}")


def coerce(text, hint):
    """Parse a string into the type named by a dataclass field annotation."""
    if not isinstance(text, str):
        return text  # already typed
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in _UNION_ORIGINS:
        non_none = [a for a in args if a is not type(None)]
        if text.strip().lower() in _NONE_WORDS and type(None) in args:
            return None
        return coerce(text, non_none[0])
    if origin in (tuple, list):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        elem = args[0] if args else str
        seq = [_coerce_scalar(t, elem) for t in items]
        return tuple(seq) if origin is tuple else seq
    return _coerce_scalar(text, hint)


def _build(cls, flat: dict[str, object], prefix: str, default_obj):
    """Construct dataclass `cls` from dotted keys under `prefix`."""
    hints = _type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        hint = hints[f.name]
        nested = _nested_dataclass(hint)
        if nested is not None:
            sub_keys = {k for k in flat if k.startswith(key + ".")}
            sub_default = getattr(default_obj, f.name) if default_obj is not None else None
            if sub_keys or sub_default is not None:
                base = sub_default if sub_default is not None else nested()
                if sub_keys:
                    kwargs[f.name] = _build(nested, flat, key + ".", base)
                else:
                    kwargs[f.name] = base
            continue
        if key in flat:
            kwargs[f.name] = coerce(flat[key], hint)
        elif default_obj is not None:
            kwargs[f.name] = getattr(default_obj, f.name)
    return cls(**kwargs)


def _nested_dataclass(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    if typing.get_origin(hint) in _UNION_ORIGINS:
        for a in typing.get_args(hint):
            if dataclasses.is_dataclass(a):
                return a
    return None


def from_flat(cls, flat: dict[str, object], defaults=None):
    """Build a dataclass from a flat dotted-key mapping, falling back to
    `defaults` (an instance) for keys not present."""
    return _build(cls, flat, "", defaults)


def valid_keys(cls, prefix: str = "") -> set[str]:
    keys = set()
    hints = _type_hints(cls)
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        nested = _nested_dataclass(hints[f.name])
        if nested is not None:
            keys |= valid_keys(nested, key + ".")
        else:
            keys.add(key)
    return keys


def check_keys(flat: dict[str, object], allowed: set[str]) -> None:
    for key in flat:
        if key not in allowed:
            near = difflib.get_close_matches(key, sorted(allowed), n=3)
            hint = f"; nearest valid keys: {', '.join(near)}" if near else ""
            raise ConfigError(f"unknown config key {key!r}{hint}")


def parse_config_file(path) -> dict[str, str]:
    """Read `key = value` lines; '#' starts a comment; blanks ignored."""
    flat: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            flat[key.strip()] = value.strip()
    return flat


def parse_overrides(pairs) -> dict[str, str]:
    """['a.b=1', ...] -> {'a.b': '1'} with validation of the form."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_model_config(file_path=None, overrides=None):
    """defaults < config file < overrides -> a validated ModelConfig."""
    from .model import ModelConfig

    flat: dict[str, object] = {}
    if file_path is not None:
        flat.update(parse_config_file(file_path))
    flat.update(parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    check_keys(flat, valid_keys(ModelConfig))

    # two passes so bottleneck dims derived from the encoder act as the
    # defaults under any explicit bottleneck.* keys
    base = from_flat(ModelConfig, {k: v for k, v in flat.items() if not k.startswith("bottleneck.")},
                     defaults=ModelConfig())
    base = base.resolved()
    final = from_flat(ModelConfig, flat, defaults=base)
    return final.resolved()
