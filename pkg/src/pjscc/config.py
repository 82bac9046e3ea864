"""Run configuration in flat ``section.key = value`` text.

Example::

    # tiny universal model
    output_dir = runs/pjscc_u_tiny
    model.preset = tiny
    model.cbr = 1/3
    train.steps = 2000
    train.distributions = awgn,rayleigh
    data.train = synthetic:shapes:500:0
    eval.dataset = synthetic:shapes:100:1
    eval.snr_points = 1,4,7,10,13

Lists are comma separated, floats accept ``a/b`` fractions, booleans accept
true/false. Unknown keys are errors. ``model.preset`` (low | high | tiny)
seeds the model section before the remaining model keys are applied. The
``PJSCC_OUTPUT_DIR`` environment variable overrides ``output_dir``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

from .codec import ModelConfig
from .trainer import TrainSpec

OUTPUT_DIR_ENV = "PJSCC_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    snr_points: list = field(default_factory=lambda: [1.0, 4.0, 7.0, 10.0, 13.0])
    distributions: list = field(default_factory=lambda: ["awgn", "rayleigh"])
    dataset: str = "synthetic:shapes:100:1"
    batch_size: int = 50
    seed: int = 1234


@dataclass
class DataConfig:
    train: str = "synthetic:shapes:500:0"
    label_bytes: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


_SECTIONS = ("model", "train", "eval", "data")
_LIST_TYPES = {
    ("model", "stage_dims"): int, ("model", "blocks"): int, ("model", "num_heads"): int,
    ("model", "level_snrs"): float, ("model", "distributions"): str,
    ("train", "distributions"): str, ("train", "eval_snrs"): float,
    ("eval", "snr_points"): float, ("eval", "distributions"): str,
}


def _field_types(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = type(f.default)
        else:
            out[f.name] = list
    return out


def _parse_scalar(text: str, typ, where: str):
    try:
        if typ is bool:
            low = text.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(Fraction(text.strip())) if "/" in text else float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {typ.__name__}") from None


def _parse_value(section: str, key: str, text: str, typ, where: str):
    if typ is list:
        elem = _LIST_TYPES.get((section, key), str)
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        return [_parse_scalar(t, elem, where) for t in items]
    return _parse_scalar(text, typ, where)


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str, int]]:
    pairs = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in s.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((key, value, lineno))
    return pairs


def loads(text: str, source: str = "<config>", env: bool = True) -> RunConfig:
    pairs = parse_pairs(text, source)
    sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    top: dict[str, Any] = {}
    preset = None
    classes = {"model": ModelConfig, "train": TrainSpec, "eval": EvalConfig, "data": DataConfig}
    for key, value, lineno in pairs:
        where = f"{source}:{lineno}"
        if key == "model.preset":
            preset = value.strip().lower()
            continue
        if "." not in key:
            if key != "output_dir":
                raise ConfigError(f"{where}: unknown key {key!r}")
            top[key] = value
            continue
        section, name = key.split(".", 1)
        if section not in classes:
            raise ConfigError(f"{where}: unknown section {section!r}")
        types = _field_types(classes[section])
        if name not in types:
            raise ConfigError(f"{where}: unknown key {key!r}")
        sections[section][name] = _parse_value(section, name, value, types[name], where)
    try:
        if preset is None:
            model = ModelConfig(**sections["model"])
        elif preset in ("low", "high", "tiny"):
            model = getattr(ModelConfig, preset)(**sections["model"])
        else:
            raise ConfigError(f"{source}: unknown model preset {preset!r}")
        cfg = RunConfig(model=model, train=TrainSpec(**sections["train"]),
                        eval=EvalConfig(**sections["eval"]), data=DataConfig(**sections["data"]),
                        **top)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{source}: {e}") from e
    if env and os.environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = os.environ[OUTPUT_DIR_ENV]
    return cfg


def load(path: str | os.PathLike, env: bool = True) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return loads(p.read_text(), str(p), env=env)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg: RunConfig) -> str:
    lines = [f"output_dir = {cfg.output_dir}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def dump(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps(cfg))
