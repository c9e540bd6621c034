"""Training configuration and its YAML file format.

A config file is a YAML mapping whose keys mirror ``TrainConfig``; ``weights``
and ``recipe`` are nested mappings.  Errors name the offending key and, when
read from a file, its line.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any

import yaml

from .degrade import RecipeRanges
from .losses import LossWeights


class ConfigError(ValueError):
    pass


# degradation ranges scaled for 64x64 toy faces (library defaults target 512x512)
TOY_RECIPE = RecipeRanges(blur_sigma=(0.2, 2.5), down_factor=(1.0, 4.0), noise_sigma=(0.0, 0.08), jpeg_quality=(30, 90))


@dataclass
class TrainConfig:
    regime: str = "epsilon"
    steps: int = 500
    batch_size: int = 4
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    weight_decay: float = 1e-4
    p_clean: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    recipe: RecipeRanges = field(default_factory=lambda: TOY_RECIPE)
    checkpoint_every: int = 0
    image_size: int = 64
    fixed_T: int | None = None
    # components
    encoder: str = "toy"
    encoder_dim: int = 32
    patch_size: int = 8
    encoder_depth: int = 2
    train_encoder: bool = True
    cond_dim: int = 64
    gen_width: int = 16
    codec: str = "identity"
    condition_mode: str = "sdfm"
    streams: str = "both"
    gate_eps: float = 0.01
    pool: str = "mean"
    f_embedding: bool = False
    disc_width: int = 16
    disc_conditioned: bool | None = None
    perceptual: str = "toy"
    restorer: str = "stage0"
    restorer_steps: int = 300
    update_order: str = "g_then_d"
    lr_schedule: str = "constant"
    lr_warmup: int = 0

    def __post_init__(self):
        if self.regime not in ("epsilon", "rf"):
            raise ConfigError(f"regime: must be 'epsilon' or 'rf', got {self.regime!r}")
        if self.steps < 0:
            raise ConfigError(f"steps: must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not 0 <= self.p_clean <= 1:
            raise ConfigError(f"p_clean: must lie in [0, 1], got {self.p_clean}")
        if self.lr_generator < 0 or self.lr_discriminator < 0:
            raise ConfigError("lr_generator/lr_discriminator: must be >= 0")
        if self.restorer not in ("stage0", "identity"):
            raise ConfigError(f"restorer: must be 'stage0' or 'identity', got {self.restorer!r}")
        if self.update_order not in ("g_then_d", "d_then_g"):
            raise ConfigError(f"update_order: must be 'g_then_d' or 'd_then_g', got {self.update_order!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule: must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.disc_conditioned is None:
            # only the noise-prediction regime conditions its discriminator by default
            self.disc_conditioned = self.regime == "epsilon"

    @classmethod
    def reference(cls, regime: str, **overrides) -> "TrainConfig":
        """Settings from the reference training table (optimizer rates, batch, T, weights, p_clean)."""
        if regime == "rf":
            base = dict(regime="rf", lr_generator=5e-5, lr_discriminator=5e-5, batch_size=1, steps=10_000,
                        fixed_T=750, p_clean=0.5, weights=LossWeights.for_regime("rf"), recipe=RecipeRanges())
        else:
            base = dict(regime="epsilon", lr_generator=2e-4, lr_discriminator=2e-4, batch_size=2, steps=100_000,
                        fixed_T=399, weights=LossWeights.for_regime("epsilon"), recipe=RecipeRanges())
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, regime: str, **overrides) -> "TrainConfig":
        """Desk-scale overfit settings: 4-image batches, higher learning rates, reference loss weights."""
        base = dict(regime=regime, steps=500, batch_size=4, lr_generator=2e-3, lr_discriminator=1e-3,
                    weights=LossWeights.for_regime(regime), p_clean=0.5)
        base.update(overrides)
        return cls(**base)

    def lr_factor(self, step: int) -> float:
        """Multiplier on both learning rates at 1-based ``step``."""
        warm = min(1.0, step / self.lr_warmup) if self.lr_warmup > 0 else 1.0
        if self.lr_schedule == "constant" or self.steps <= 1:
            return warm
        return warm * 0.5 * (1 + math.cos(math.pi * (step - 1) / self.steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recipe"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["recipe"].items()}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number."""
    lines: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    walk(root, "")
    return lines


def _where(key, lines, source):
    if key in lines:
        return f"{source} line {lines[key]}"
    return source


def _coerce(key, value, typ, lines, source):
    def fail():
        raise ConfigError(f"key '{key}' ({_where(key, lines, source)}): cannot use {value!r} as {typ}")

    if typ in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            fail()
        return value
    if typ in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail()
        return float(value)
    if typ in (bool, "bool"):
        if not isinstance(value, bool):
            fail()
        return value
    if typ in (str, "str"):
        if not isinstance(value, str):
            fail()
        return value
    return value


_SCALAR_TYPES = {
    "int": int, "float": float, "bool": bool, "str": str,
    "int | None": int, "bool | None": bool,
}


def config_from_mapping(data: dict[str, Any], lines: dict[str, int] | None = None, source: str = "<config>") -> TrainConfig:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs: dict[str, Any] = {}
    preset = data.get("preset", "toy")
    for key, value in data.items():
        if key == "preset":
            if value not in ("toy", "reference"):
                raise ConfigError(f"key 'preset' ({_where(key, lines, source)}): must be 'toy' or 'reference'")
            continue
        if key not in fields:
            raise ConfigError(f"unknown key '{key}' ({_where(key, lines, source)})")
        if key == "weights":
            kwargs[key] = _sub(LossWeights, value, "weights", lines, source)
        elif key == "recipe":
            kwargs[key] = _sub(RecipeRanges, value, "recipe", lines, source)
        else:
            typ = _SCALAR_TYPES.get(str(fields[key].type), None)
            if value is None and "None" in str(fields[key].type):
                kwargs[key] = None
            else:
                kwargs[key] = _coerce(key, value, typ, lines, source) if typ else value
    try:
        regime = kwargs.pop("regime", "epsilon")
        if preset == "reference":
            return TrainConfig.reference(regime, **kwargs)
        return TrainConfig.toy(regime, **kwargs)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        raise ConfigError(f"{exc} ({_where(key, lines, source)})") from None
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _sub(cls, value, name, lines, source):
    if not isinstance(value, dict):
        raise ConfigError(f"key '{name}' ({_where(name, lines, source)}): expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for k, v in value.items():
        path = f"{name}.{k}"
        if k not in names:
            raise ConfigError(f"unknown key '{path}' ({_where(path, lines, source)})")
        if isinstance(v, list):
            if len(v) != 2:
                raise ConfigError(f"key '{path}' ({_where(path, lines, source)}): expected [low, high]")
            v = tuple(v)
        out[k] = v
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key '{name}' ({_where(name, lines, source)}): {exc}") from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: invalid YAML: {exc}") from None
    return config_from_mapping(data, _line_map(text), str(path))


def load_recipe(path):
    """Read a single ``DegradationRecipe`` from a YAML mapping."""
    from .degrade import DegradationRecipe

    path = Path(path)
    text = path.read_text()
    data = yaml.safe_load(text) or {}
    lines = _line_map(text)
    names = {f.name for f in dataclasses.fields(DegradationRecipe)}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown key '{k}' ({_where(k, lines, str(path))})")
    try:
        return DegradationRecipe(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
