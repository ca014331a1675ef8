"""Flat dotted key-value configuration files.

One experiment bundles three sections: ``synth.*`` (dataset generation),
``network.*`` (architecture), and ``train.*`` (optimization).  The text format
is one ``key = value`` pair per line, '#' comments, tuples as comma-joined
items; it is diff-friendly so ablation manifests stay readable.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .data import DataError
from .network import ConfigError, NetworkConfig
from .training import TrainConfig


@dataclass
class SynthConfig:
    """Synthetic dataset shape (the generation seed is supplied per run)."""

    num_ids: int = 10
    cams: int = 2
    frames_per_seq: int = 20
    extent: int = 32

    def validate(self) -> None:
        if self.num_ids < 2:
            raise DataError(f"num_ids must be >= 2, got {self.num_ids}")
        if self.cams < 2:
            raise DataError(f"cams must be >= 2 for probe/gallery evaluation, got {self.cams}")
        if self.frames_per_seq < 1 or self.extent < 8:
            raise DataError("frames_per_seq must be positive and extent >= 8")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.network.validate()


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def parse_flat(text: str) -> dict[str, str]:
    """'key = value' lines -> dict; later duplicates win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key in {raw!r}")
        out[key] = value.strip()
    return out


def serialize_flat(pairs: dict[str, str]) -> str:
    return "".join(f"{k} = {pairs[k]}\n" for k in sorted(pairs))


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_encode(v) for v in value)
    return str(value)


def _decode(text: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _decode(text, args[0])
    if origin in (tuple, list):
        item = typing.get_args(typ)[0]
        if not text:
            return () if origin is tuple else []
        items = [_decode(part.strip(), item) for part in text.split(",")]
        return tuple(items) if origin is tuple else items
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


_SECTIONS = (("synth", SynthConfig), ("network", NetworkConfig), ("train", TrainConfig))


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for prefix, _ in _SECTIONS:
        section = getattr(cfg, prefix)
        for f in dataclasses.fields(section):
            out[f"{prefix}.{f.name}"] = _encode(getattr(section, f.name))
    return out


def from_flat(pairs: dict[str, str]) -> ExperimentConfig:
    """Build an experiment config from dotted keys; unknown keys are errors."""
    hints = {prefix: typing.get_type_hints(cls) for prefix, cls in _SECTIONS}
    kwargs: dict[str, dict] = {prefix: {} for prefix, _ in _SECTIONS}
    known = {f"{prefix}.{f.name}": (prefix, f.name)
             for prefix, cls in _SECTIONS for f in dataclasses.fields(cls)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    for key, text in pairs.items():
        prefix, name = known[key]
        try:
            kwargs[prefix][name] = _decode(text, hints[prefix][name])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {text!r} ({e})") from e
    sections = {prefix: cls(**kwargs[prefix]) for prefix, cls in _SECTIONS}
    return ExperimentConfig(**sections)


def serialize_config(cfg: ExperimentConfig) -> str:
    return serialize_flat(to_flat(cfg))


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return from_flat(parse_flat(fh.read()))


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply repeatable 'section.key=value' assignments on top of a config."""
    pairs = to_flat(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in pairs:
            raise ConfigError(f"unknown override key {key!r}")
        pairs[key] = value.strip()
    return from_flat(pairs)
