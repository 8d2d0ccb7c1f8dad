"""Strict dataclass <-> dict conversion for config files and sidecars.

Unknown keys are rejected rather than ignored so that a typo in a config
file fails loudly instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from typing import Any, Type, TypeVar

from .errors import ValidationError

T = TypeVar("T")


def to_dict(obj: Any) -> Any:
    """Recursively convert dataclasses/tuples to JSON-friendly structures."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def from_dict(cls: Type[T], data: Any, context: str = "") -> T:
    """Build a dataclass from a dict, rejecting unknown keys.

    Nested dataclasses, Optional fields, and tuple fields are handled; other
    values are passed through and left to the dataclass's own validation.
    """
    if not isinstance(data, dict):
        raise ValidationError(f"{context or cls.__name__}: expected a mapping, got {type(data).__name__}")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(field_map))
    if unknown:
        raise ValidationError(f"{context or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, value in data.items():
        kwargs[name] = _convert(hints.get(name, field_map[name].type), value, f"{context}.{name}" if context else name)
    return cls(**kwargs)


def _convert(annot: Any, value: Any, context: str) -> Any:
    origin = typing.get_origin(annot)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annot) if a is not type(None)]
        if value is None:
            return None
        if len(args) == 1:
            return _convert(args[0], value, context)
        return value
    if dataclasses.is_dataclass(annot) and isinstance(value, dict):
        return from_dict(annot, value, context)
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def dumps(obj: Any) -> str:
    """Serialize to JSON with a stable layout (insertion-ordered keys)."""
    return json.dumps(to_dict(obj), indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
