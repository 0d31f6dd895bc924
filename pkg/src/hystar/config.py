"""Flat ``key=value`` run configuration with dotted section names.

Sections map onto the library dataclasses::

    seed = 0                  # drives data, init and batching streams
    data.n_classes = 20
    encoder.injected_layers = 2,4,6
    train.lr_hyper = 1e-3
    loss.gamma = 80

``loss.lambda`` is accepted for ``LossConfig.lambda_``. ``data.seed`` defaults to
the top-level ``seed`` unless set explicitly.
"""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .training import TrainConfig

SECTIONS = {"data": DatasetConfig, "encoder": EncoderConfig, "train": TrainConfig, "loss": LossConfig}
# fields owned elsewhere in the flat namespace
_SKIP = {("train", "loss_config"), ("train", "seed")}


@dataclass
class RunConfig:
    seed: int = 0
    data: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def loss(self) -> LossConfig:
        return self.train.loss_config


def _key_name(name: str) -> str:
    return name.rstrip("_")


def _section_fields(section: str):
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {_key_name(f.name): (f.name, hints[f.name]) for f in fields(cls) if (section, f.name) not in _SKIP}


def known_keys() -> list[str]:
    keys = ["seed"]
    for section in SECTIONS:
        keys += [f"{section}.{k}" for k in _section_fields(section)]
    return keys


def _coerce(key: str, text: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin is list:
            items = [t.strip() for t in text.split(",") if t.strip()]
            return [_coerce(key, t, args[0]) for t in items]
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{key}: given twice")
        pairs[key] = value
    return pairs


def from_pairs(pairs: dict[str, str]) -> RunConfig:
    known = set(known_keys())
    for key in pairs:
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
    seed = _coerce("seed", pairs["seed"], int) if "seed" in pairs else 0
    if seed < 0:
        raise ConfigError("seed must be unsigned")
    kwargs: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in SECTIONS:
        for short, (name, hint) in _section_fields(section).items():
            key = f"{section}.{short}"
            if key in pairs:
                kwargs[section][name] = _coerce(key, pairs[key], hint)
    kwargs["data"].setdefault("seed", seed)
    loss = LossConfig(**kwargs["loss"])
    return RunConfig(
        seed=seed,
        data=DatasetConfig(**kwargs["data"]),
        encoder=EncoderConfig(**kwargs["encoder"]),
        train=TrainConfig(**kwargs["train"], loss_config=loss, seed=seed),
    )


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        pairs = parse_pairs(text)
    for item in overrides or []:
        pairs.update(parse_pairs(item))
    return from_pairs(pairs)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_lines(cfg: RunConfig) -> list[str]:
    lines = [f"seed = {cfg.seed}"]
    objs = {"data": cfg.data, "encoder": cfg.encoder, "train": cfg.train, "loss": cfg.loss}
    for section, obj in objs.items():
        for short, (name, _) in _section_fields(section).items():
            lines.append(f"{section}.{short} = {_format(getattr(obj, name))}")
    return lines


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved.cfg"
    path.write_bytes(("\n".join(resolved_lines(cfg)) + "\n").encode("utf-8"))
    return path


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Same run with a different training seed; the dataset is left untouched."""
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
