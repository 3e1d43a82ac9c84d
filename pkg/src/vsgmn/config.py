"""Flat ``key = value`` config files and sweep grids.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Values stay strings here and are cast by the dataclass they configure.  Grid
files use the same syntax with comma-separated value lists.
"""

from dataclasses import fields
from pathlib import Path

from .data import SyntheticConfig
from .errors import ConfigError, IngestionError


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def read_config(path):
    """Parse a config file; ``None`` means an empty config."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def parse_grid_text(text, source="<grid>"):
    grid = {}
    for key, value in parse_config_text(text, source).items():
        items = [v.strip() for v in value.split(",")]
        if any(not v for v in items):
            raise ConfigError(f"{source}: empty value in the list for {key!r}")
        grid[key] = items
    if not grid:
        raise ConfigError(f"{source}: grid names no parameters")
    return grid


def read_grid(path):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"grid file not found: {path}")
    return parse_grid_text(path.read_text(encoding="utf-8"), str(path))


def build_dataclass(cls, values):
    """Instantiate ``cls`` from string values, cast by the type of each default."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    casted = {}
    for key, value in values.items():
        kind = type(getattr(cls, key))
        try:
            casted[key] = kind(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return cls(**casted)


def synthetic_config(values):
    return build_dataclass(SyntheticConfig, values)
