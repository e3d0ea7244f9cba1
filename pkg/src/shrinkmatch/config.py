"""Flat ``key = value`` run configuration files.

Keys are :class:`RunConfig` field names, ``data.<field>`` for the blob
generator, ``data_path`` / ``data_format`` / ``superclass_path`` for an
external dataset, ``ablation`` (comma list of tokens) and ``ablate.*`` keys
for the ablation grid. ``#`` starts a comment. Later assignments win.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import BlobConfig, Dataset, generate_confusable_blobs, load_external
from .errors import ConfigError
from .trainer import RunConfig

RUNDIR_ENV = "SHRINKMATCH_RUNDIR"
DEFAULT_RUNDIR = "runs"

# named variants understood by ``ablate.variants``
VARIANT_PRESETS = {
    "baseline": "no-shrink,no-aux",
    "full": "",
}

DEFAULT_VARIANTS = ("baseline", "full")


@dataclass
class AblateSpec:
    variants: tuple = DEFAULT_VARIANTS
    taus: tuple = ()          # empty: use the run's tau only
    seeds: tuple = (0, 1, 2, 3, 4)
    workers: int = 1


@dataclass
class Settings:
    """Everything a config file can express."""

    run: RunConfig = field(default_factory=RunConfig)
    data: BlobConfig = field(default_factory=BlobConfig)
    data_path: str = None
    data_format: str = None
    superclass_path: str = None
    ablation: tuple = ()
    ablate: AblateSpec = field(default_factory=AblateSpec)

    def effective_run(self) -> RunConfig:
        return self.run.with_ablation(self.ablation).validate()

    def dataset(self) -> Dataset:
        if self.data_path:
            return load_external(self.data_path, self.data_format, self.superclass_path, seed=self.data.seed)
        return generate_confusable_blobs(self.data)


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}", key)


def _coerce(text: str, typ, key: str):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "bool":
            return _parse_bool(text, key)
        if name == "int":
            return int(text)
        if name == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"expected {name}, got {text!r}", key) from None
    return text


def _split_list(text: str, sep: str = ",") -> tuple:
    return tuple(t.strip() for t in text.split(sep) if t.strip())


def apply(settings: Settings, key: str, value: str) -> Settings:
    """Return ``settings`` with one ``key = value`` assignment applied."""
    key = key.strip()
    value = value.strip()
    run_types = {f.name: f.type for f in fields(RunConfig)}
    blob_types = {f.name: f.type for f in fields(BlobConfig)}
    if key in run_types:
        return replace(settings, run=replace(settings.run, **{key: _coerce(value, run_types[key], key)}))
    if key.startswith("data."):
        sub = key[5:]
        if sub not in blob_types:
            raise ConfigError(f"unknown data key; choose from {sorted(blob_types)}", key)
        return replace(settings, data=replace(settings.data, **{sub: _coerce(value, blob_types[sub], key)}))
    if key in ("data_path", "data_format", "superclass_path"):
        return replace(settings, **{key: value or None})
    if key == "ablation":
        return replace(settings, ablation=_split_list(value))
    if key.startswith("ablate."):
        sub = key[7:]
        spec = settings.ablate
        try:
            if sub == "variants":
                spec = replace(spec, variants=_split_list(value, ";"))
            elif sub == "taus":
                spec = replace(spec, taus=tuple(float(t) for t in _split_list(value)))
            elif sub == "seeds":
                spec = replace(spec, seeds=tuple(int(t) for t in _split_list(value)))
            elif sub == "workers":
                spec = replace(spec, workers=int(value))
            else:
                raise ConfigError("unknown ablate key; choose from variants, taus, seeds, workers", key)
        except ValueError:
            raise ConfigError(f"cannot parse {value!r}", key) from None
        return replace(settings, ablate=spec)
    raise ConfigError("unknown configuration key", key)


def parse_text(text: str, source: str = "<string>", base: Settings = None) -> Settings:
    settings = base or Settings()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}", "syntax")
        key, value = line.split("=", 1)
        try:
            settings = apply(settings, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc.message}", exc.field) from None
    return settings


def load(path=None, overrides=(), base: Settings = None) -> Settings:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    settings = base or Settings()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", "config") from None
        settings = parse_text(text, str(p), settings)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}", "set")
        k, v = item.split("=", 1)
        settings = apply(settings, k, v)
    return settings


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(settings: Settings) -> str:
    """Serialise settings back to the file format (round-trips through :func:`parse_text`)."""
    lines = ["# effective configuration"]
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {_fmt(getattr(settings.run, f.name))}")
    lines.append(f"ablation = {','.join(settings.ablation)}")
    for f in fields(BlobConfig):
        lines.append(f"data.{f.name} = {_fmt(getattr(settings.data, f.name))}")
    for k in ("data_path", "data_format", "superclass_path"):
        v = getattr(settings, k)
        if v:
            lines.append(f"{k} = {v}")
    a = settings.ablate
    lines.append(f"ablate.variants = {';'.join(a.variants)}")
    lines.append(f"ablate.taus = {','.join(repr(t) for t in a.taus)}")
    lines.append(f"ablate.seeds = {','.join(str(s) for s in a.seeds)}")
    lines.append(f"ablate.workers = {a.workers}")
    return "\n".join(lines) + "\n"


def variant_tokens(name: str) -> str:
    """Ablation tokens for a named preset or a literal token list."""
    return VARIANT_PRESETS.get(name, name)


def run_root() -> Path:
    return Path(os.environ.get(RUNDIR_ENV) or DEFAULT_RUNDIR)


__all__ = ["Settings", "AblateSpec", "apply", "parse_text", "load", "dump", "variant_tokens", "run_root",
           "RUNDIR_ENV", "VARIANT_PRESETS"]
