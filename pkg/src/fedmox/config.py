"""Flat INI run configuration.

Five sections, one per component: [federation] [ssl] [moe] [data] [optim].
Every key maps to a dataclass field; unknown keys and sections are rejected.
A few values are derived rather than configured so they cannot disagree:
the client count of the world follows federation.num_clients, and the head's
input channels and class count follow the data section.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .data import WorldConfig
from .federation import FLConfig
from .moe import HeadConfig
from .optim import OptimConfig
from .ssl import SSLConfig

SECTIONS = {
    "federation": FLConfig,
    "ssl": SSLConfig,
    "moe": HeadConfig,
    "data": WorldConfig,
    "optim": OptimConfig,
}
DERIVED = {("data", "num_clients"), ("moe", "in_channels"), ("moe", "num_classes")}
# keys a config file must spell out; everything else falls back to defaults
REQUIRED = ("federation.rounds", "federation.alpha", "moe.num_experts", "optim.kind")


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _keys(section: str) -> list[str]:
    return [f.name for f in fields(SECTIONS[section]) if (section, f.name) not in DERIVED]


def _format(key: str, value) -> str:
    if value is None:
        return "none" if key == "global_router_size" else "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, default):
    text = text.strip()
    try:
        if key == "domain_experts":
            if not text:
                return {}
            return {int(a): int(b) for a, b in (p.split(":") for p in text.split(","))}
        if key == "global_router_size":
            return None if text in ("", "none", "auto") else tuple(int(v) for v in text.split("x"))
        if key in ("hidden", "expert_out"):
            return None if text == "auto" else int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass
class RunConfig:
    federation: FLConfig = field(default_factory=FLConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    moe: HeadConfig = field(default_factory=HeadConfig)
    data: WorldConfig = field(default_factory=WorldConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        # keep the derived values in step
        self.data = replace(self.data, num_clients=self.federation.num_clients)
        self.moe = replace(self.moe, in_channels=self.data.feature_channels, num_classes=self.data.num_classes)

    @property
    def seed(self) -> int:
        return self.federation.seed

    def values(self) -> dict:
        return {f"{s}.{k}": getattr(getattr(self, s), k) for s in SECTIONS for k in _keys(s)}

    def to_ini(self) -> str:
        out = []
        for s in SECTIONS:
            out.append(f"[{s}]")
            obj = getattr(self, s)
            out.extend(f"{k} = {_format(k, getattr(obj, k))}" for k in _keys(s))
            out.append("")
        return "\n".join(out)

    def hash(self) -> str:
        """Digest of every setting except the training seed."""
        text = self.with_overrides({"federation.seed": "0"}).to_ini()
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.hash()}-seed{self.seed}"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        updates: dict[str, dict] = {}
        for key, text in overrides.items():
            section, name = _split(key)
            default = getattr(getattr(self, section), name)
            updates.setdefault(section, {})[name] = _parse(name, str(text), default)
        return _build({s: {**_current(self, s), **updates.get(s, {})} for s in SECTIONS})


def _split(key: str) -> tuple[str, str]:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(key, f"unknown key (expected <section>.<name>, sections {list(SECTIONS)})")
    if name not in _keys(section):
        raise ConfigError(key, "unknown key")
    return section, name


def _current(cfg: RunConfig, section: str) -> dict:
    obj = getattr(cfg, section)
    return {k: getattr(obj, k) for k in _keys(section)}


def _build(values: dict) -> RunConfig:
    built = {}
    for s, cls in SECTIONS.items():
        try:
            built[s] = cls(**values.get(s, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(s, str(exc)) from None
    return RunConfig(**built)


def parse_config(text: str, require: bool = True) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    present = set()
    values: dict[str, dict] = {}
    defaults = RunConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        for name, raw in cp.items(section):
            key = f"{section}.{name}"
            _split(key)
            present.add(key)
            values.setdefault(section, {})[name] = _parse(name, raw, getattr(getattr(defaults, section), name))
    if require:
        for key in REQUIRED:
            if key not in present:
                raise ConfigError(key, "required key missing")
    return _build({s: {**_current(defaults, s), **values.get(s, {})} for s in SECTIONS})


def load_config(path, require: bool = True) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), require=require)


def default_config() -> RunConfig:
    return RunConfig()


def parse_overrides(items) -> dict:
    """``["a.b=1", ...]`` to ``{"a.b": "1"}``."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like KEY=VALUE")
        out[key.strip()] = value.strip()
    return out


def dump(cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write("# fedmox run config v1\n")
    buf.write(cfg.to_ini())
    return buf.getvalue()
