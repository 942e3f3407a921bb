"""Run configuration: one YAML key-value tree covering every stage.

Sub-seeds (data generation, embeddings, splitting, training) are all derived
from the single master ``seed``, so the sections carry no seeds of their own.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .data import GenConfig
from .model import TrainConfig
from .tree2vec import VARIANTS, Tree2vecConfig, TreeFlags

M_VALUES = (0.010, 0.015, 0.020, 0.025, 0.030, 0.035, 0.040, 0.045, 0.050)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TextConfig:
    dim: int = 64
    epochs: int = 50
    negatives: int = 5
    lr: float = 0.05


@dataclass(frozen=True)
class GraphConfig:
    alpha: float = 0.05
    similarity_inversion: bool = True
    dim: int = 64
    walk_len: int = 40
    walks_per_node: int = 10
    p: float = 1.0
    q: float = 1.0
    window: int = 5
    negatives: int = 5
    epochs: int = 100
    lr: float = 0.05


@dataclass(frozen=True)
class TreeConfig:
    feat_dim: int = 64
    gcn_hidden: int = 64
    gcn_out: int = 64
    d_model: int = 64
    heads: int = 2
    layers: int = 2
    ff_dim: int = 128
    max_len: int = 128
    flow: str = "down"

    def encoder(self) -> Tree2vecConfig:
        kw = dataclasses.asdict(self)
        kw.pop("flow")
        return Tree2vecConfig(**kw)


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.0015
    batch: int = 30
    negatives: int = 4
    max_epochs: int = 8  # fits the three-seed comparison in the time budget
    patience: int = 5
    resample_negatives: bool = True
    early_stop_k: int = 10

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self))


@dataclass(frozen=True)
class DataSection:
    n_common_users: int = 300
    n_unique_users: int = 60
    n_items: int = 200
    n_categories: int = 40
    n_dishes: int = 150
    sparsity_A: float = 0.04
    latent_dim: int = 8
    vocab_size: int = 500
    doc_len: tuple = (20, 50)
    max_dishes_per_user: int = 4
    max_recipe_categories: int = 3
    max_items_per_category: int = 2
    taste_sharpness: float = 8.0
    category_boost: float = 4.0
    recipe_item_boost: float = 2.0

    def build(self, seed: int, m: float | None = None) -> GenConfig:
        kw = dataclasses.asdict(self)
        if m is None:
            return GenConfig(rng_seed=seed, **kw)
        kw.pop("n_unique_users")
        return GenConfig.with_unique_proportion(m, rng_seed=seed, **kw)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "full"
    split: tuple = (0.8, 0.1, 0.1)
    data: DataSection = field(default_factory=DataSection)
    text: TextConfig = field(default_factory=TextConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    train: TrainSection = field(default_factory=TrainSection)
    ablation_variants: tuple = tuple(VARIANTS)
    seeds: tuple = (0, 1, 2)
    m_values: tuple = M_VALUES

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        bad = [v for v in self.ablation_variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown ablation variants {bad}")
        if any(not 0 < m < 1 for m in self.m_values):
            raise ConfigError("m_values must lie in (0, 1)")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three ratios summing to 1, got {self.split}")

    def flags(self, variant: str | None = None) -> TreeFlags:
        return dataclasses.replace(VARIANTS[variant or self.variant], flow=self.tree.flow)

    def with_overrides(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})

    # -- serialization
    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw or {}, "")

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        raw = yaml.safe_load(text)
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_yaml(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_yaml())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for name, value in raw.items():
        default = cls.__dataclass_fields__[name]
        proto = default.default if default.default is not dataclasses.MISSING else default.default_factory()
        if dataclasses.is_dataclass(proto):
            kw[name] = _build(type(proto), value, f"{where}{name}.")
        elif isinstance(proto, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}{name}: expected a list")
            kw[name] = tuple(value)
        elif isinstance(proto, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{name}: expected true or false")
            kw[name] = value
        elif isinstance(proto, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}{name}: expected a number")
            kw[name] = float(value)
        elif isinstance(proto, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}{name}: expected an integer")
            kw[name] = value
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from None
