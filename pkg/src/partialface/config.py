"""Run configuration: a flat ``section.key=value`` text document.

Blank lines and lines starting with ``#`` are ignored.  Every key belongs to
one of the sections below and has a default; unknown keys are rejected.

=============  =============================================================
section        keys
=============  =============================================================
``backbone``   input_size, stem_channels, blocks_per_stage, stage_channels,
               K, pre_activation, bottleneck_ratio
``model``      recalib, aggregate, weighted_ce, embedding_dim, keep_prob,
               l2_include_biases, seed
``loss``       ce, div, reg
``pretrain``   every TrainConfig field except ``stage``
``finetune``   every TrainConfig field except ``stage``
``data``       num_identities, images_per_identity, image_size, seed,
               test_per_identity, max_shift
``paths``      data_dir, checkpoint, trace
=============  =============================================================

Tuple values are comma separated (``backbone.stage_channels=32,64,128``);
booleans accept true/false/1/0/yes/no; ``none`` clears an optional value.
Defaults are the desk-scale presets (``TOY_BACKBONE``, ``TOY_PRETRAIN``,
``TOY_FINETUNE``, ``ToyDatasetConfig()``, ``LossWeights()``).
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import TOY_BACKBONE, BackboneConfig
from .data import ToyDatasetConfig
from .losses import LossWeights
from .model import ModelConfig
from .train import TOY_FINETUNE, TOY_PRETRAIN, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    recalib: str = "softmax_sigmoid"
    aggregate: bool = True
    weighted_ce: bool = True
    embedding_dim: int = 32
    keep_prob: float = 0.8
    l2_include_biases: bool = False
    seed: int = 0
    # training images used to fit the affine layers of a fresh model; 0 keeps identity init
    calibrate_images: int = 100


@dataclass(frozen=True)
class PathsSection:
    data_dir: str | None = None
    checkpoint: str | None = None
    trace: str | None = None


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = TOY_BACKBONE
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossWeights = field(default_factory=LossWeights)
    pretrain: TrainConfig = TOY_PRETRAIN
    finetune: TrainConfig = TOY_FINETUNE
    data: ToyDatasetConfig = field(default_factory=ToyDatasetConfig)
    paths: PathsSection = field(default_factory=PathsSection)

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(backbone=self.backbone, recalib=m.recalib, aggregate=m.aggregate,
                           weighted_ce=m.weighted_ce, embedding_dim=m.embedding_dim,
                           num_classes=num_classes or self.data.num_identities,
                           keep_prob=m.keep_prob, l2_include_biases=m.l2_include_biases)

    def train_config(self, stage: str) -> TrainConfig:
        if stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {stage!r}")
        return getattr(self, stage)

    def to_text(self) -> str:
        lines = ["# partialface-config v1"]
        for section in fields(self):
            obj = getattr(self, section.name)
            for f in fields(obj):
                if section.name in ("pretrain", "finetune") and f.name == "stage":
                    continue
                lines.append(f"{section.name}.{f.name}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if origin is tuple:
            return tuple(_parse(part.strip(), args[0], key) for part in raw.split(",") if part.strip())
        if hint in (int, float, str):
            return hint(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported value type {hint}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    base = RunConfig()
    updates: dict[str, dict[str, object]] = {}
    sections = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected section.key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        obj = getattr(base, section)
        hints = typing.get_type_hints(type(obj))
        if name not in hints or (section in ("pretrain", "finetune") and name == "stage"):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            updates.setdefault(section, {})[name] = _parse(raw, hints[name], key)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    try:
        return replace(base, **{s: replace(getattr(base, s), **kv) for s, kv in updates.items()})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
