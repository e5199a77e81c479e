"""Key=value config files shared by model and trainer configs."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_kv(path: str | Path, items: dict[str, str]) -> None:
    lines = [f"{k}={v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def coerce_dataclass_kv(cls, raw: dict[str, str]):
    """Build a dataclass from string values, casting per field type."""
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = known[key].type
        if "bool" in str(ftype):
            kwargs[key] = val.lower() in ("1", "true", "yes", "on")
        elif "int" in str(ftype):
            kwargs[key] = int(val)
        elif "float" in str(ftype):
            kwargs[key] = float(val)
        elif "tuple" in str(ftype):
            kwargs[key] = tuple(v for v in val.split(",") if v)
        else:
            kwargs[key] = val
    return cls(**kwargs)


def dataclass_to_kv(obj) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, tuple):
            out[f.name] = ",".join(str(v) for v in val)
        else:
            out[f.name] = str(val)
    return out
