"""Experiment configuration: schema, shipped profiles and validation.

A config document is a YAML (or JSON) mapping with one section per training
component. Keys may also be given flat (``lambda_kl: 0.5``) when the name is
unique across sections.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DataConfig:
    task: str = "mnist"  # perfect_pair | motif | mnist
    seq_len: int = 784
    vocab_size: int = 2
    n_train: int = 60000
    motif_k: int = 4
    motif_weights: list[float] | None = None
    motif_seed: int = 0
    threshold: float = 0.5
    num_classes: int = 10
    conditional: bool = False
    image_shape: list[int] | None = field(default_factory=lambda: [28, 28])


@dataclass
class ModelConfig:
    encoder_arch: str = "conv"  # mlp | attention | conv
    encoder_width: int = 64
    encoder_depth: int = 2
    latent_shape: list[int] = field(default_factory=lambda: [49, 16])
    generator_arch: str = "attention"  # mlp | attention
    generator_width: int = 512
    generator_depth: int = 8
    generator_heads: int = 8
    denoiser_arch: str = "attention"
    denoiser_width: int = 256
    denoiser_depth: int = 4
    denoiser_heads: int = 4


@dataclass
class StageAConfig:
    lambda_rec: float = 1.0
    lambda_kl: float = 1.0
    lambda_flow: float = 1.0
    latent_noise_std: float = 0.5
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    flow_weight_anneal: list[float] | None = None  # [start, end, fraction of training]
    pair_mode: str = "resampled"  # resampled | frozen


@dataclass
class StageBConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    z_scale: float = 1.0
    temperature: float = 1.0
    ema_decay: float | None = None


@dataclass
class FlowConfig:
    num_blocks: int = 5
    hidden_width: int = 128
    num_layers_per_block: int = 5
    subnet: str = "mlp"  # mlp | attention
    heads: int = 4
    clamp: float = 5.0


@dataclass
class MDMConfig:
    schedule: str = "linear"  # linear | cosine
    temperatures: list[float] | float = 1.0
    remask_strength: float = 1.0
    steps: int = 4
    t_min: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4


@dataclass
class GuidanceConfig:
    mode: str = "cfg"  # cfg | latent_classifier | reward_ft
    cfg_scale: float = 2.0
    guidance_steps: int = 5
    step_size: float = 0.1
    relaxation: str = "soft"  # soft | gumbel_st
    relaxation_temperature: float = 1.0
    lambda_reward: float = 1.0
    lambda_anchor: float = 1.0
    anchor: str = "logit_mse"  # logit_mse | kl
    cond_dropout_rate: float = 0.1
    finetune_steps: int = 200
    finetune_lr: float = 1e-4


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    profile: str = "mnist-binary"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage_a: StageAConfig = field(default_factory=StageAConfig)
    stage_b: StageBConfig = field(default_factory=StageBConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    mdm: MDMConfig = field(default_factory=MDMConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def latent_dim(self) -> int:
        p, c = self.model.latent_shape
        return p * c


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "stage_a": StageAConfig,
    "stage_b": StageBConfig,
    "flow": FlowConfig,
    "mdm": MDMConfig,
    "guidance": GuidanceConfig,
}
TOP_LEVEL = ("schema_version", "profile", "seed")

PROFILES: dict[str, dict[str, Any]] = {
    # full-size MNIST-Binary configuration; the section defaults above already match it.
    "mnist-binary": {},
    "mnist-binary-mini": {
        "model": {"generator_width": 256, "generator_depth": 4, "generator_heads": 4},
        "flow": {"num_blocks": 3, "num_layers_per_block": 2},
        "stage_a": {"epochs": 10, "learning_rate": 1e-3},
        "stage_b": {"epochs": 10, "learning_rate": 5e-4},
    },
    "toy-pair": {
        "data": {"task": "perfect_pair", "seq_len": 2, "vocab_size": 2, "n_train": 4096,
                 "num_classes": 2, "image_shape": None},
        "model": {"encoder_arch": "mlp", "encoder_width": 64, "encoder_depth": 2,
                  "latent_shape": [1, 2], "generator_arch": "mlp", "generator_width": 128,
                  "generator_depth": 2, "denoiser_arch": "mlp", "denoiser_width": 128,
                  "denoiser_depth": 2},
        "flow": {"num_blocks": 4, "hidden_width": 64, "num_layers_per_block": 2},
        "stage_a": {"epochs": 200, "batch_size": 256, "learning_rate": 3e-3,
                    "weight_decay": 1e-4, "latent_noise_std": 0.5,
                    "lambda_kl": 0.1},
        "stage_b": {"epochs": 60, "batch_size": 256, "learning_rate": 3e-3},
        "mdm": {"epochs": 60, "batch_size": 256, "learning_rate": 3e-3, "steps": 2},
    },
    "toy-motif": {
        "data": {"task": "motif", "seq_len": 8, "vocab_size": 4, "n_train": 8192,
                 "motif_k": 4, "num_classes": 4, "image_shape": None},
        "model": {"encoder_arch": "mlp", "encoder_width": 128, "encoder_depth": 2,
                  "latent_shape": [1, 2], "generator_arch": "mlp", "generator_width": 128,
                  "generator_depth": 2, "denoiser_arch": "mlp", "denoiser_width": 128,
                  "denoiser_depth": 2},
        "flow": {"num_blocks": 4, "hidden_width": 64, "num_layers_per_block": 2},
        "stage_a": {"epochs": 100, "batch_size": 256, "learning_rate": 3e-3,
                    "latent_noise_std": 0.5, "lambda_kl": 0.1},
        "stage_b": {"epochs": 40, "batch_size": 256, "learning_rate": 3e-3},
        "mdm": {"epochs": 40, "batch_size": 256, "learning_rate": 3e-3},
    },
}


def _flat_index() -> dict[str, list[str]]:
    index: dict[str, list[str]] = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            index.setdefault(f.name, []).append(section)
    return index


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _nest(raw: dict[str, Any]) -> dict[str, Any]:
    index = _flat_index()
    nested: dict[str, Any] = {}
    for key, value in raw.items():
        if key in TOP_LEVEL or key in SECTIONS:
            if key in SECTIONS and not isinstance(value, dict):
                raise ConfigError(key, "section must be a mapping")
            nested[key] = _deep_merge(nested.get(key, {}), value) if key in SECTIONS else value
            continue
        owners = index.get(key)
        if not owners:
            raise ConfigError(key, "unknown key")
        if len(owners) > 1:
            raise ConfigError(key, f"ambiguous flat key; use one of {', '.join(o + '.' + key for o in owners)}")
        nested.setdefault(owners[0], {})[key] = value
    return nested


def _build(cls, values: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in names:
            raise ConfigError(f"{section}.{k}", "unknown key")
    return cls(**values)


def _check(cfg: ExperimentConfig) -> None:
    def nonneg(path: str, v: float) -> None:
        if not v >= 0:
            raise ConfigError(path, f"{path.split('.')[-1]} must be ≥ 0")

    def positive(path: str, v: float) -> None:
        if not v > 0:
            raise ConfigError(path, f"{path.split('.')[-1]} must be > 0")

    def choice(path: str, v: str, options: tuple[str, ...]) -> None:
        if v not in options:
            raise ConfigError(path, f"must be one of {options}, got {v!r}")

    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported schema version {cfg.schema_version}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", "seed must be a non-negative integer")

    d = cfg.data
    choice("data.task", d.task, ("perfect_pair", "motif", "mnist"))
    if d.seq_len < 1:
        raise ConfigError("data.seq_len", "seq_len must be ≥ 1")
    if d.vocab_size < 2:
        raise ConfigError("data.vocab_size", "vocab_size must be ≥ 2")
    positive("data.n_train", d.n_train)
    if not 0 < d.threshold < 1:
        raise ConfigError("data.threshold", "threshold must lie in (0, 1)")
    if d.motif_weights is not None:
        if len(d.motif_weights) != d.motif_k or min(d.motif_weights) < 0:
            raise ConfigError("data.motif_weights", "need motif_k non-negative weights")

    m = cfg.model
    choice("model.encoder_arch", m.encoder_arch, ("mlp", "attention", "conv"))
    choice("model.generator_arch", m.generator_arch, ("mlp", "attention"))
    choice("model.denoiser_arch", m.denoiser_arch, ("mlp", "attention"))
    if len(m.latent_shape) != 2 or min(m.latent_shape) < 1:
        raise ConfigError("model.latent_shape", "latent_shape must be [positions, channels]")
    if m.latent_shape[1] < 2:
        raise ConfigError("model.latent_shape", "coupling layers need at least 2 latent channels")
    if m.encoder_arch == "conv":
        if d.image_shape is None or m.latent_shape[0] != (d.image_shape[0] // 4) * (d.image_shape[1] // 4):
            raise ConfigError("model.latent_shape", "conv encoder downsamples the image grid by 4 per side")

    a = cfg.stage_a
    for name in ("lambda_rec", "lambda_kl", "lambda_flow"):
        nonneg(f"stage_a.{name}", getattr(a, name))
    positive("stage_a.latent_noise_std", a.latent_noise_std)
    choice("stage_a.pair_mode", a.pair_mode, ("resampled", "frozen"))
    if a.flow_weight_anneal is not None and len(a.flow_weight_anneal) != 3:
        raise ConfigError("stage_a.flow_weight_anneal", "expected [start, end, fraction]")

    for section in ("stage_a", "stage_b", "mdm"):
        s = getattr(cfg, section)
        if s.epochs < 0:
            raise ConfigError(f"{section}.epochs", "epochs must be ≥ 0")
        if s.batch_size < 1:
            raise ConfigError(f"{section}.batch_size", "batch_size must be ≥ 1")
        positive(f"{section}.learning_rate", s.learning_rate)
        nonneg(f"{section}.weight_decay", s.weight_decay)

    b = cfg.stage_b
    positive("stage_b.z_scale", b.z_scale)
    positive("stage_b.temperature", b.temperature)
    if b.ema_decay is not None and not 0 < b.ema_decay < 1:
        raise ConfigError("stage_b.ema_decay", "ema_decay must lie in (0, 1)")

    f = cfg.flow
    for name in ("num_blocks", "hidden_width", "num_layers_per_block", "heads"):
        if getattr(f, name) < 1:
            raise ConfigError(f"flow.{name}", f"{name} must be ≥ 1")
    choice("flow.subnet", f.subnet, ("mlp", "attention"))
    positive("flow.clamp", f.clamp)

    md = cfg.mdm
    choice("mdm.schedule", md.schedule, ("linear", "cosine"))
    if md.steps < 1:
        raise ConfigError("mdm.steps", "steps K must be ≥ 1")
    temps = md.temperatures if isinstance(md.temperatures, list) else [md.temperatures]
    if isinstance(md.temperatures, list) and len(temps) != md.steps:
        raise ConfigError("mdm.temperatures", "need one temperature per step")
    for t in temps:
        positive("mdm.temperatures", t)
    nonneg("mdm.remask_strength", md.remask_strength)
    if not 0 < md.t_min < 1:
        raise ConfigError("mdm.t_min", "t_min must lie in (0, 1)")

    g = cfg.guidance
    choice("guidance.mode", g.mode, ("cfg", "latent_classifier", "reward_ft"))
    if g.guidance_steps < 0:
        raise ConfigError("guidance.guidance_steps", "guidance_steps must be ≥ 0")
    nonneg("guidance.step_size", g.step_size)
    choice("guidance.relaxation", g.relaxation, ("soft", "gumbel_st"))
    positive("guidance.relaxation_temperature", g.relaxation_temperature)
    nonneg("guidance.lambda_reward", g.lambda_reward)
    nonneg("guidance.lambda_anchor", g.lambda_anchor)
    choice("guidance.anchor", g.anchor, ("logit_mse", "kl"))
    if not 0 <= g.cond_dropout_rate < 1:
        raise ConfigError("guidance.cond_dropout_rate", "cond_dropout_rate must lie in [0, 1)")


def validate_config(raw: dict[str, Any] | ExperimentConfig | None = None) -> ExperimentConfig:
    """Fill defaults from the named profile and check every constraint.

    Raises :class:`ConfigError` on the first violation.
    """
    if isinstance(raw, ExperimentConfig):
        raw = raw.to_dict()
    raw = dict(raw or {})
    nested = _nest(raw)
    profile = nested.get("profile", "mnist-binary")
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = _deep_merge(PROFILES[profile], nested)
    merged["profile"] = profile
    kwargs: dict[str, Any] = {k: merged[k] for k in TOP_LEVEL if k in merged}
    for section, cls in SECTIONS.items():
        kwargs[section] = _build(cls, merged.get(section, {}), section)
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as e:
        raise ConfigError("<root>", str(e)) from e
    _check(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config document must be a mapping")
    return validate_config(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
