"""TOML experiment configuration with strict keys.

Sections and defaults::

    [model]  recipe="Ti/16" variant="parallel_stabilized" image_size=32 patch_size=4
             num_classes=10 seed=0 (optional overrides: layers hidden_dim mlp_size heads)
    [train]  preset="stabilizing" lr=1e-4 weight_decay=0.05 epochs=200 batch_size=128
             clip_threshold=10.0 (false disables) milestones=[0.3,0.6,0.9] lr_decay_factor=0.1
             seed=0 augment_flips=true max_steps (unset) logit_cap=4000 grad_cap=1e4 patience=3
    [data]   source="synthetic" | "cifar10" | "cifar100" path="" n_train=2048 n_test=0 seed=0
             domain_a="" domain_b="" toy_n=256
    [gan]    lambda_cycle=10 lambda_identity=5 lr=2e-4 beta1=0.5 beta2=0.999 pool_size=50
             steps=2000 batch_size=1 cnn_tail_blocks=3 tail_channels=32 levels=1
             sample_every=500 eval_n=64 extractor_seed=0 seed=0
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from parallax.errors import ConfigError, DimensionError, UsageError
from parallax.stability import PRESETS, TrainConfig
from parallax.vit import BlockVariant, Recipe, get_recipe
from parallax.vitunet import GanLossWeights, ViTUnetConfig


@dataclass
class ModelConfig:
    recipe: str = "Ti/16"
    variant: str = "parallel_stabilized"
    image_size: int = 32
    patch_size: int = 4
    num_classes: int = 10
    seed: int = 0
    layers: int | None = None
    hidden_dim: int | None = None
    mlp_size: int | None = None
    heads: int | None = None

    def build_recipe(self) -> Recipe:
        base = get_recipe(self.recipe)
        layers = self.layers or base.layers
        dim = self.hidden_dim or base.hidden_dim
        custom = any(v is not None for v in (self.layers, self.hidden_dim, self.mlp_size, self.heads))
        return Recipe(
            f"{base.name}*" if custom else base.name,
            layers,
            dim,
            self.mlp_size or (4 * dim if self.hidden_dim else base.mlp_size),
            self.heads or base.heads,
            self.patch_size,
            self.image_size,
            self.num_classes,
        )

    @property
    def block_variant(self) -> BlockVariant:
        return BlockVariant.parse(self.variant)


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    n_train: int = 2048
    n_test: int = 0
    seed: int = 0
    domain_a: str = ""
    domain_b: str = ""
    toy_n: int = 256


@dataclass
class GanConfig:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    pool_size: int = 50
    steps: int = 2000
    batch_size: int = 1
    cnn_tail_blocks: int = 3
    tail_channels: int = 32
    levels: int = 1
    sample_every: int = 500
    eval_n: int = 64
    extractor_seed: int = 0
    seed: int = 0

    @property
    def weights(self) -> GanLossWeights:
        return GanLossWeights(self.lambda_cycle, self.lambda_identity)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gan: GanConfig = field(default_factory=GanConfig)

    def vitunet(self) -> ViTUnetConfig:
        return ViTUnetConfig(
            self.model.build_recipe(),
            self.model.block_variant,
            self.model.patch_size,
            self.model.image_size,
            self.gan.cnn_tail_blocks,
            self.gan.tail_channels,
            self.gan.levels,
        )

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "gan": asdict(self.gan),
        }


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "gan": GanConfig}
_OPTIONAL_INT = {"layers", "hidden_dim", "mlp_size", "heads", "max_steps"}


def _line_of(text: str, section: str | None, key: str | None = None) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        header = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", stripped)
        if header:
            current = header.group(1)
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return lineno
    return None


def _coerce(section: str, key: str, value, default, text: str):
    line = _line_of(text, section, key)
    if key in _OPTIONAL_INT:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be an integer", line)
        return value
    if key == "clip_threshold":
        if value is False or (isinstance(value, str) and value.lower() == "none"):
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"[{section}] clip_threshold must be a number or false", line)
    if key == "milestones":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"[{section}] milestones must be a list of numbers", line)
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be true or false", line)
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be an integer", line)
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be a number", line)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key} must be a string", line)
        return value
    return value


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", getattr(exc, "lineno", None)) from exc
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section))
        if not isinstance(doc[section], dict):
            raise ConfigError(f"{section} must be a table", _line_of(text, None, section))

    built = {}
    for section, cls in _SECTIONS.items():
        raw = dict(doc.get(section, {}))
        defaults = {f.name: f.default for f in fields(cls)}
        if section == "train":
            name = raw.pop("preset", "stabilizing")
            if name not in PRESETS:
                raise ConfigError(f"unknown train preset {name!r}", _line_of(text, section, "preset"))
            defaults = {**{f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}, **PRESETS[name]}
        values = dict(defaults)
        for key, value in raw.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]", _line_of(text, section, key))
            values[key] = _coerce(section, key, value, defaults[key], text)
        try:
            built[section] = cls(**values)
        except (UsageError, DimensionError) as exc:
            culprit = next((k for k in raw if k in str(exc)), None)
            line = _line_of(text, section, culprit) if culprit else _line_of(text, section)
            raise ConfigError(f"[{section}] {exc}", line) from exc

    cfg = ExperimentConfig(**built)
    try:
        cfg.model.build_recipe()
        cfg.model.block_variant
    except (UsageError, DimensionError) as exc:
        raise ConfigError(f"[model] {exc}", _line_of(text, "model")) from exc
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Parse a TOML config file; unknown sections or keys are errors."""
    if path is None:
        return ExperimentConfig()
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
