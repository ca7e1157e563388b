"""Built-in message types and payload validation.

The wire carries plain JSON objects; the schema registry (a versioned data
file shipped with the package) pins which fields each message type carries.
The pseudo-type ``*`` accepts any topic type and skips validation; it exists
for generic tooling like echo and bag recording.
"""

from __future__ import annotations

import json
from importlib import resources

ANY_TYPE = "*"


class SchemaError(ValueError):
    """Payload does not match the message type's field schema."""


def _load_registry():
    text = resources.files("mrctl").joinpath("data/message_schemas.json").read_text()
    return json.loads(text)


_REGISTRY = _load_registry()
SCHEMA_VERSION = _REGISTRY["version"]
TYPES = _REGISTRY["types"]


def is_known_type(msg_type: str) -> bool:
    return msg_type in TYPES


def types_compatible(advertised: str, requested: str) -> bool:
    """Wildcard matches anything; otherwise exact string equality."""
    return ANY_TYPE in (advertised, requested) or advertised == requested


def _check_value(value, descriptor, path, msg_type):
    if descriptor == "float":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaError(f"{msg_type}: {path} must be a number, got {type(value).__name__}")
    elif descriptor == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise SchemaError(f"{msg_type}: {path} must be an int, got {type(value).__name__}")
    elif descriptor == "str":
        if not isinstance(value, str):
            raise SchemaError(f"{msg_type}: {path} must be a string, got {type(value).__name__}")
    elif descriptor == "bool":
        if not isinstance(value, bool):
            raise SchemaError(f"{msg_type}: {path} must be a bool, got {type(value).__name__}")
    elif descriptor.endswith("[]"):
        if not isinstance(value, list):
            raise SchemaError(f"{msg_type}: {path} must be a list, got {type(value).__name__}")
        inner = descriptor[:-2]
        for i, item in enumerate(value):
            _check_value(item, inner, f"{path}[{i}]", msg_type)
    elif descriptor in TYPES:
        _check_fields(value, TYPES[descriptor], path, msg_type)
    else:
        raise SchemaError(f"{msg_type}: unknown descriptor {descriptor!r} at {path}")


def _check_fields(value, schema, path, msg_type):
    if not isinstance(value, dict):
        raise SchemaError(f"{msg_type}: {path} must be an object, got {type(value).__name__}")
    missing = set(schema) - set(value)
    extra = set(value) - set(schema)
    if missing:
        raise SchemaError(f"{msg_type}: {path} missing fields {sorted(missing)}")
    if extra:
        raise SchemaError(f"{msg_type}: {path} has unexpected fields {sorted(extra)}")
    for name, descriptor in schema.items():
        _check_value(value[name], descriptor, f"{path}.{name}", msg_type)


def validate_payload(msg_type: str, payload) -> None:
    """Raise SchemaError unless payload matches the registered field schema."""
    if msg_type == ANY_TYPE:
        return
    schema = TYPES.get(msg_type)
    if schema is None:
        raise SchemaError(f"unknown message type {msg_type!r}")
    _check_fields(payload, schema, "payload", msg_type)


def field_order(msg_type: str) -> list[str] | None:
    """Declared field order for rendering, None for unknown types."""
    schema = TYPES.get(msg_type)
    return list(schema) if schema else None
