"""INI-style experiment configuration.

Sections map onto the nested dataclasses of :class:`ExperimentConfig`::

    [experiment]      top-level fields (task, method, n_angles, nfe, seed, ...)
    [phantom]         OODVolumeSpec
    [adapt]           AdaptConfig
    [approximator]    ApproximatorConfig (inside adapt)
    [meta]            MetaConfig (inside adapt)
    [train]           TrainConfig

Keys are the dataclass field names. Tuples are comma separated and ``none``
clears optional values.
"""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import replace
from typing import Any

from .experiment import ExperimentConfig, for_task

SECTIONS = {
    "experiment": (),
    "phantom": ("phantom",),
    "adapt": ("adapt",),
    "approximator": ("adapt", "approximator"),
    "meta": ("adapt", "meta"),
    "train": ("train",),
}


def _field_types(obj) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(obj)}


def coerce(type_str: str, text: str) -> Any:
    """Parse ``text`` according to a dataclass annotation string."""
    t = type_str.replace(" ", "")
    s = text.strip()
    if "None" in t and s.lower() in ("none", ""):
        return None
    if t.startswith("tuple"):
        inner = re.findall(r"int|float|str", t)
        kind = {"int": int, "float": float, "str": str}[inner[0] if inner else "float"]
        return tuple(kind(v) for v in s.replace("(", "").replace(")", "").split(",") if v.strip())
    if t.startswith("bool"):
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if t.startswith("int"):
        return int(s)
    if t.startswith("float"):
        return float(s)
    return s


def _get(cfg, path):
    for p in path:
        cfg = getattr(cfg, p)
    return cfg


def _set(cfg, path, value):
    if not path:
        return value
    head, rest = path[0], path[1:]
    return replace(cfg, **{head: _set(getattr(cfg, head), rest, value)})


def set_value(cfg: ExperimentConfig, key: str, text: str) -> ExperimentConfig:
    """Apply ``section.key=value`` (or a bare top-level key) to ``cfg``."""
    section, _, name = key.rpartition(".")
    section = section or "experiment"
    if section not in SECTIONS:
        raise KeyError(f"unknown config section {section!r}")
    path = SECTIONS[section]
    target = _get(cfg, path)
    types = _field_types(target)
    if name not in types or dataclasses.is_dataclass(getattr(target, name)):
        raise KeyError(f"unknown key {name!r} in section [{section}]")
    value = coerce(types[name], text)
    return _set(cfg, path, replace(target, **{name: value}))


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case (K, L)
    cp.read_string(text)
    task = cp.get("experiment", "task", fallback=None)
    cfg = base or for_task(task or "ct3d")
    for section in cp.sections():
        for key, value in cp.items(section):
            cfg = set_value(cfg, f"{section}.{key}", value)
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, path in SECTIONS.items():
        obj = _get(cfg, path)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)


def all_keys() -> list[tuple[str, str]]:
    """(section.key, annotation) for every configurable scalar."""
    cfg = ExperimentConfig()
    out = []
    for section, path in SECTIONS.items():
        obj = _get(cfg, path)
        for f in dataclasses.fields(obj):
            if not dataclasses.is_dataclass(getattr(obj, f.name)):
                out.append((f"{section}.{f.name}", str(f.type)))
    return out
