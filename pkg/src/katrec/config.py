"""Run configuration, ablation variants and flat TOML I/O."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VARIANTS = ("none", "no_attention", "level1", "connection", "no_pretrain", "concat")

# Column labels used in ablation tables.
VARIANT_LABELS = {
    "none": "KATRec",
    "no_attention": "NoAtten",
    "level1": "Level-1",
    "connection": "Connect",
    "no_pretrain": "NoPretrain",
    "concat": "Concat",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dimensions
    d: int = 64
    layer_dims: tuple = (32, 16, 16)
    d_r: int = 0  # 0 means "same as d"
    num_blocks: int = 2
    n_heads: int = 2
    max_len: int = 50
    positional: str = "learned"
    # regularization / masking
    mask_prob: float = 0.2
    dropout: float = 0.1
    kg_lambda: float = 1e-5
    leaky_slope: float = 0.2
    # optimization
    lr: float = 1e-4
    kg_lr: float = 0.0  # 0 means "same as lr"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lr_decay: bool = True
    pretrain_epochs: int = 50
    epochs: int = 200
    patience: int = 10
    triplet_batch: int = 1024
    seq_batch: int = 256
    # initialization
    init_std: float = 0.02
    init_low: float = -0.02
    init_high: float = 0.02
    # data
    min_interactions: int = 10
    min_entity_occurrences: int = 10
    min_relation_occurrences: int = 50
    eval_negatives: int = 100
    max_neighbors: int = 0  # 0 means no cap
    bucket_edges: tuple = ()
    interactions: str = ""
    triplets: str = ""
    # run
    seed: int = 0
    dtype: str = "float32"
    ablation: str = "none"
    explicit_user: bool = False
    track_train_cloze: bool = False

    def __post_init__(self):
        self.layer_dims = tuple(int(x) for x in self.layer_dims)
        self.bucket_edges = tuple(int(x) for x in self.bucket_edges)
        self.validate()

    def validate(self):
        if self.ablation not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {self.ablation!r}; expected one of {VARIANTS}")
        if self.q % self.n_heads:
            raise ConfigError(f"hidden width q={self.q} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.positional not in ("learned", "sinusoid", "none"):
            raise ConfigError(f"unknown positional mode {self.positional!r}")
        if not 0.0 < self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must be in (0, 1], got {self.mask_prob}")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")

    # derived quantities
    @property
    def q(self) -> int:
        return self.d + sum(self.layer_dims)

    @property
    def relation_dim(self) -> int:
        return self.d_r or self.d

    @property
    def attention_mode(self) -> str:
        return "uniform" if self.ablation == "no_attention" else "attentive"

    @property
    def connected(self) -> bool:
        return self.ablation != "connection"

    @property
    def pretrain(self) -> bool:
        return self.ablation != "no_pretrain"

    @property
    def fuse(self) -> bool:
        return self.ablation != "concat"

    @property
    def kg_learning_rate(self) -> float:
        return self.kg_lr or self.lr

    # sklearn-style nested parameter access
    def get_params(self, deep=True):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def set_params(self, **params):
        for k in params:
            if k not in self.get_params():
                raise ConfigError(f"unknown config key {k!r}")
        new = dataclasses.replace(self, **params)
        self.__dict__.update(new.__dict__)
        return self

    def __sklearn_clone__(self):
        return dataclasses.replace(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def apply_ablation(config: RunConfig, variant: str) -> RunConfig:
    """Config for one ablation variant; ``level1`` keeps only the first propagation layer."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    if variant == "none":
        return config
    changes = {"ablation": variant}
    if variant == "level1":
        changes["layer_dims"] = config.layer_dims[:1]
    return config.replace(**changes)


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def coerce(key: str, value):
    """Convert a raw override (string or TOML value) to the field's type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(default, tuple):
            text = text.strip("[]() ")
            return tuple(int(x) for x in text.replace(",", " ").split()) if text else ()
        try:
            return type(default)(text)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    if isinstance(default, tuple):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def load_config(path=None, overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Read a flat TOML file over ``base`` (or the defaults), then apply ``overrides``."""
    values = base.get_params() if base is not None else {}
    if path:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        for k, v in raw.items():
            if isinstance(v, dict):
                raise ConfigError(f"config must be flat; found table {k!r}")
            values[k] = coerce(k, v)
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return RunConfig(**values)


def dumps_config(config: RunConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def toy_config(**overrides) -> RunConfig:
    """Small dimensions and loose thresholds suited to the bundled toy fixture."""
    base = dict(
        d=16,
        layer_dims=(8, 4, 4),
        num_blocks=2,
        n_heads=2,
        max_len=16,
        dropout=0.0,
        mask_prob=0.2,
        lr=1e-3,
        kg_lr=1e-2,
        weight_decay=0.0,
        lr_decay=False,
        pretrain_epochs=100,
        epochs=300,
        patience=0,
        triplet_batch=128,
        seq_batch=4,
        min_interactions=10,
        min_entity_occurrences=1,
        min_relation_occurrences=1,
        eval_negatives=3,
        kg_lambda=1e-5,
        seed=17,
        dtype="float64",
        init_std=0.1,
        init_low=-0.2,
        init_high=0.2,
        track_train_cloze=True,
    )
    base.update(overrides)
    return RunConfig(**base)
