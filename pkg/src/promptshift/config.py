"""Run configuration: schema-versioned JSON with strict unknown-key rejection.

A RunConfig document has five sections (world, model, loss, train, inference).
Every field is defaulted; parsing an empty document yields the desk defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

SCHEMA_VERSION = 1

# Minimum offset strength for which a planted token clears the pseudo-mask
# threshold tau = 0.2 on an orthogonal base token: 1 - 1/sqrt(1+b^2) > 0.2
# requires b > 0.75 exactly.
BETA_LOWER_BOUND = 0.75


@dataclass
class WorldConfig:
    """Geometry of the synthetic embedding/latent universe."""

    embed_dim: int = 64
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    total_steps: int = 50
    pairs: int = 300
    seeds_per_prompt: int = 2
    vocab_size: int = 256
    # prompt length classes: short, medium, long (inclusive ranges)
    length_short: tuple[int, int] = (5, 8)
    length_medium: tuple[int, int] = (10, 16)
    length_long: tuple[int, int] = (21, 24)
    beta: float = 0.9
    tau: float = 0.2
    min_planted: int = 1
    max_planted: int = 3
    # sampling weights for the planted count k = min_planted..max_planted
    planted_weights: tuple[float, ...] = (0.12, 0.44, 0.44)
    vocab_flavor_cap: float = 0.1
    decoy_fraction: float = 0.25
    style_strength: float = 1.2
    adv_rot_deg: tuple[float, float] = (5.0, 20.0)
    signal_linear: float = 2.6
    signal_carrier: float = 40.0
    background_noise: float = 0.4
    flavor_threshold: float = 0.35

    def max_length(self) -> int:
        return self.length_long[1]

    def validate(self) -> None:
        if self.beta <= BETA_LOWER_BOUND:
            raise ConfigError(
                f"offset strength beta={self.beta} cannot clear tau={self.tau}: "
                f"requires beta > {BETA_LOWER_BOUND}"
            )
        if not (0.0 <= self.decoy_fraction <= 0.5):
            raise ConfigError(f"decoy_fraction must be in [0, 0.5], got {self.decoy_fraction}")
        if self.pairs % 3 != 0:
            raise ConfigError(f"pairs must split evenly over three length classes, got {self.pairs}")
        if self.min_planted < 1 or self.max_planted < self.min_planted:
            raise ConfigError("planted count range invalid")
        span = self.max_planted - self.min_planted + 1
        if len(self.planted_weights) != span:
            raise ConfigError(
                f"planted_weights needs {span} entries for k in "
                f"[{self.min_planted}, {self.max_planted}], got {len(self.planted_weights)}")
        if any(w < 0 for w in self.planted_weights) or sum(self.planted_weights) <= 0:
            raise ConfigError("planted_weights must be nonnegative and sum positive")
        if self.length_short[0] < 3:
            raise ConfigError("prompts need style, subject, and at least one more token")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    total_steps: int = 50
    latent_channels: tuple[int, ...] = (32, 64, 128)
    gn_groups: int = 8
    latent_feat: int = 512
    timestep_feat: int = 64
    heads: int = 4
    classifier_hidden: int = 256
    delta_width: int = 128
    adapter_rank: int = 8
    mask_hidden: int = 64
    mask_attn_dim: int = 64
    alpha_hidden: int = 32
    pos_dim: int = 32
    dropout: float = 0.1
    mask_position: bool = True
    tie_unsafe: bool = False
    max_len: int = 32
    precision: str = "float32"

    def joint_dim(self) -> int:
        return self.latent_feat + self.timestep_feat

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_mse: float = 0.5
    lambda_cos: float = 0.1
    lambda_mask: float = 0.1
    lambda_alpha: float = 1.0
    smoothing_eps: float = 0.05
    conf_penalty_w: float = 0.01
    l2_delta_w: float = 0.01

    def validate(self) -> None:
        for name in ("lambda_cls", "lambda_mse", "lambda_cos", "lambda_mask",
                     "lambda_alpha", "conf_penalty_w", "l2_delta_w"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.smoothing_eps < 0.5:
            raise ConfigError(f"smoothing_eps must be in [0, 0.5), got {self.smoothing_eps}")


ABLATION_FLAGS = (
    "no_mask", "no_alpha", "no_latent", "no_timestep", "no_prompt",
    "no_mse", "no_cos", "no_conf", "no_smoothing", "no_reg",
)


@dataclass
class AblationFlags:
    no_mask: bool = False
    no_alpha: bool = False
    no_latent: bool = False
    no_timestep: bool = False
    no_prompt: bool = False
    no_mse: bool = False
    no_cos: bool = False
    no_conf: bool = False
    no_smoothing: bool = False
    no_reg: bool = False

    def active(self) -> list[str]:
        return [f for f in ABLATION_FLAGS if getattr(self, f)]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: int = 5
    stop_at_val_acc: float | None = None
    loss: LossWeights = field(default_factory=LossWeights)
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def effective_loss(self) -> LossWeights:
        """Loss weights with ablation flags applied (each flag zeroes its term)."""
        lw = dataclasses.replace(self.loss)
        a = self.ablations
        if a.no_mse:
            lw.lambda_mse = 0.0
        if a.no_cos:
            lw.lambda_cos = 0.0
        if a.no_mask:
            lw.lambda_mask = 0.0
        if a.no_conf:
            lw.conf_penalty_w = 0.0
        if a.no_smoothing:
            lw.smoothing_eps = 0.0
        if a.no_reg:
            lw.l2_delta_w = 0.0
        return lw


@dataclass
class InferenceConfig:
    total_steps: int = 50
    cooldown: int = 5
    alpha_scale: float = 1.0
    hard_mask: bool = False

    def validate(self) -> None:
        if self.cooldown < 0:
            raise ConfigError(f"cooldown must be nonnegative, got {self.cooldown}")
        if self.alpha_scale < 0:
            raise ConfigError(f"alpha_scale must be nonnegative, got {self.alpha_scale}")


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        # the train section owns the authoritative LossWeights; keep them shared
        self.train.loss = self.loss

    def validate(self) -> None:
        self.world.validate()
        self.model.validate()
        self.loss.validate()
        self.inference.validate()


_TUPLE_FIELDS = {
    "latent_shape", "length_short", "length_medium", "length_long",
    "adv_rot_deg", "latent_channels", "planted_weights",
}


def _dataclass_from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    if cls is TrainConfig and "loss" in data:
        raise ConfigError("train.loss is not a key; loss weights live in the top-level loss section")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTION_TYPES:
            kwargs[name] = _dataclass_from_dict(_SECTION_TYPES[name], value, f"{path}.{name}")
        elif name in _TUPLE_FIELDS:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "loss": LossWeights,
    "ablations": AblationFlags,
}


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    sections = {"world": WorldConfig, "model": ModelConfig, "loss": LossWeights,
                "train": TrainConfig, "inference": InferenceConfig}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
    kwargs = {}
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = _dataclass_from_dict(cls, data[name], name)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def run_config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)
                    if not (isinstance(obj, TrainConfig) and f.name == "loss")}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    out = {"schema_version": SCHEMA_VERSION}
    for section in ("world", "model", "loss", "train", "inference"):
        out[section] = convert(getattr(cfg, section))
    return out


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def save_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
