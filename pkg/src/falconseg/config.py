"""Typed run configuration: defaults, JSON files, dotted-key overrides.

Precedence is defaults < config file < command-line overrides.  Every level
rejects unknown keys so typos fail loudly instead of silently running the
default.  A run's resolved config can be serialized back out and hashed;
the digest lands in reports so result files are traceable to their exact
configuration.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from falconseg.errors import ConfigError
from falconseg.losses import LossConfig


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 3
    channels_per_level: tuple = (8, 16, 32)
    bottleneck_channels: int = 32
    input_size: tuple = (32, 32)
    encoder_kind: str = "toy_conv"
    support_k: int = 5
    proto_agg: str = "sum"
    relation_enabled: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if len(self.channels_per_level) != self.depth:
            raise ConfigError(
                f"channels_per_level needs {self.depth} entries, "
                f"got {len(self.channels_per_level)}"
            )
        if any(c < 1 for c in self.channels_per_level):
            raise ConfigError("channel counts must be positive")
        h, w = self.input_size
        stride_total = 2 ** (self.depth - 1)
        if h % stride_total or w % stride_total:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by {stride_total} "
                f"(2^(depth-1))"
            )
        if self.encoder_kind not in ("toy_conv", "large_backbone"):
            raise ConfigError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.proto_agg not in ("sum", "mean"):
            raise ConfigError(f"proto_agg must be 'sum' or 'mean', got {self.proto_agg!r}")
        if self.support_k < 0:
            raise ConfigError("support_k must be >= 0")

    @property
    def bottleneck_size(self):
        s = 2 ** (self.depth - 1)
        return (self.input_size[0] // s, self.input_size[1] // s)


# Widths of the larger configuration used for compute-budget reporting; the
# reference design point is about 9.90M parameters / 2.30 GFLOPs at 224x224.
LARGE_BACKBONE = NetworkConfig(
    depth=6,
    channels_per_level=(8, 16, 32, 96, 192, 448),
    bottleneck_channels=884,
    input_size=(224, 224),
    encoder_kind="large_backbone",
)


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple = (16, 32, 64, 128)
    leaky_slope: float = 0.2
    dropout_rate: float = 0.25

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ConfigError("discriminator needs at least one conv layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    lr: float = 0.001
    query_per_episode: int = 1
    ft_epochs: int = 8
    ft_loss: str = "hd_adv"
    disc_enabled: bool = True
    disc_steps_per_gen_step: int = 1
    unlabeled_adv_batch: int = 4
    adv_fake_queries_only: bool = False
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.ft_loss not in ("bce", "dice", "hd", "hd_adv"):
            raise ConfigError(f"unknown ft_loss {self.ft_loss!r}")
        if self.episodes < 0 or self.ft_epochs < 0:
            raise ConfigError("episode/epoch counts must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0 (0 disables)")


@dataclass(frozen=True)
class EvalConfig:
    prob_threshold: float = 0.5
    hd95_mode: str = "max"

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError("prob_threshold must lie in (0, 1)")
        if self.hd95_mode not in ("max", "mean"):
            raise ConfigError("hd95_mode must be 'max' or 'mean'")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


_SECTIONS = {
    "network": NetworkConfig,
    "disc": DiscriminatorConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
_TUPLE_FIELDS = {"channels_per_level", "input_size", "channels"}


def as_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)

    def tuples_to_lists(obj):
        if isinstance(obj, dict):
            return {k: tuples_to_lists(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return tuples_to_lists(d)


def _build_section(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config keys under {where}: {sorted(unknown)}")
    coerced = {}
    for k, v in values.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        coerced[k] = v
    try:
        return cls(**coerced)
    except TypeError as e:
        raise ConfigError(f"bad value under {where}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"bad value under {where}: {e}") from e


def from_dict(d: dict) -> RunConfig:
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - top_names
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    base = as_dict(RunConfig())
    for section, values in d.items():
        if section == "seed":
            base["seed"] = values
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        base[section].update(values)
    kwargs = {
        name: _build_section(cls, base[name], name) for name, cls in _SECTIONS.items()
    }
    if not isinstance(base["seed"], int) or isinstance(base["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {base['seed']!r}")
    return RunConfig(seed=base["seed"], **kwargs)


def load(path) -> RunConfig:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return from_dict(d)


def parse_override(text: str):
    """Parse "section.key=value"; value read as JSON, else literal string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, _, raw = text.partition("=")
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if key == "seed":
        return ["seed"], value
    parts = key.split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(
            f"override key {key!r} must be dotted as section.key (or 'seed=N')"
        )
    return parts, value


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    d = as_dict(cfg)
    for text in overrides or ():
        path, value = parse_override(text)
        if path == ["seed"]:
            d["seed"] = value
            continue
        section, key = path
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        d[section][key] = value
    return from_dict(d)


def resolve(config_path=None, overrides=None) -> RunConfig:
    cfg = load(config_path) if config_path else RunConfig()
    return apply_overrides(cfg, overrides)


def digest(cfg: RunConfig) -> str:
    blob = json.dumps(as_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_resolved(cfg: RunConfig, path):
    with open(path, "w") as f:
        json.dump(as_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
