"""Declarative run configuration.

A run config is a YAML document with sections data / model / losses /
train / eval. Unknown keys are rejected, every run writes its fully
resolved config next to its outputs, and hashes of the canonical JSON
form tie corpora, checkpoints, and reports together.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import CLASSIFIER_KINDS, PHONEME_LOSS_KINDS


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class DataConfig:
    seed: int = 0
    num_train_keywords: int = 200
    num_eval_keywords: int = 100
    train_utterances_per_keyword: int = 6
    eval_utterances_per_keyword: int = 4
    vocab_size: int = 40
    feat_dim: int = 40
    min_phonemes: int = 3
    max_phonemes: int = 10
    min_duration: int = 2
    max_duration: int = 5
    jitter_sigma: float = 0.3
    speaker_sigma: float = 0.2
    noise_sigma: float = 0.1


@dataclass
class ModelConfig:
    embed_dim: int = 256
    acoustic_channels: int = 64
    acoustic_layers: int = 3
    acoustic_kernel: int = 3
    text_hidden: int = 64
    ccsp_hidden: int = 64
    modality_hidden: int = 256


@dataclass
class AdvConfig:
    enabled_phn: bool = False
    enabled_utt: bool = False
    grl_scale: float = 1.0
    # weight of the adversarial term in the minimax objective
    lambda_: float = 0.1
    # decay on the modality classifier keeps it calibrated instead of
    # saturated, which keeps the minimax gradients alive at small scale
    classifier_weight_decay: float = 1e-5

    _KEY_ALIASES = {"lambda": "lambda_"}


@dataclass
class LossConfig:
    phoneme: str = "asyp_adams"
    utterance: str = "rp"
    classifier: str = "none"
    monotonic: bool = True
    band_width: float = 0.1
    alpha_init: float = 0.01
    beta_init: float = 1.5
    lambda_init: float = 0.01
    rp_dist_weight: float = 1.0
    rp_angle_weight: float = 1.0
    rp_proto_weight: float = 1.0
    rp_huber_delta: float = 1.0
    rp_proto_temperature: float = 0.1
    infonce_temperature: float = 0.07
    triplet_margin: float = 0.2
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    sf2_scale: float = 30.0
    sf2_margin: float = 0.2
    sf2_t_balance: float = 3.0
    adv: AdvConfig = field(default_factory=AdvConfig)

    def validate(self) -> None:
        if self.phoneme not in PHONEME_LOSS_KINDS + ("none",):
            raise ConfigError(f"losses.phoneme: unknown kind {self.phoneme!r}")
        if self.utterance not in ("rp", "none"):
            raise ConfigError(f"losses.utterance: unknown kind {self.utterance!r}")
        if self.classifier not in CLASSIFIER_KINDS:
            raise ConfigError(f"losses.classifier: unknown kind {self.classifier!r}")
        if self.adv.lambda_ < 0:
            raise ConfigError("losses.adv.lambda must be nonnegative")


@dataclass
class TrainConfig:
    keywords_per_batch: int = 16
    utterances_per_keyword: int = 2
    epochs: int = 30
    base_lr: float = 1e-4
    lr_halving_period: int = 20
    weight_decay: float = 1e-5
    lambda_phn: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self) -> None:
        if self.keywords_per_batch < 2:
            raise ConfigError("train.keywords_per_batch must be >= 2")
        if self.utterances_per_keyword < 2:
            raise ConfigError("train.utterances_per_keyword must be >= 2")
        if self.lambda_phn < 0:
            raise ConfigError("train.lambda_phn must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.lr_halving_period < 1:
            raise ConfigError("train.lr_halving_period must be >= 1")


@dataclass
class EvalConfig:
    neg_ratio: int = 50
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.losses.validate()
        self.train.validate()
        if self.eval.neg_ratio < 0:
            raise ConfigError("eval.neg_ratio must be nonnegative")
        return self


_TYPE_MAP = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(value, target_type, path: str):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _dataclass_from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    aliases = getattr(cls, "_KEY_ALIASES", {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in fields or name.startswith("_"):
            raise ConfigError(f"unknown config key: {path}.{key}")
        f = fields[name]
        if name == "adv":
            kwargs[name] = _dataclass_from_dict(AdvConfig, value, f"{path}.{key}")
        else:
            ftype = _TYPE_MAP.get(f.type) if isinstance(f.type, str) else f.type
            if ftype is None:
                raise ConfigError(f"{path}.{key}: unsupported field type {f.type}")
            kwargs[name] = _coerce(value, ftype, f"{path}.{key}")
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> RunConfig:
    """Build and validate a RunConfig from a (possibly partial) mapping."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    section_types = {"data": DataConfig, "model": ModelConfig,
                     "losses": LossConfig, "train": TrainConfig,
                     "eval": EvalConfig}
    for key, value in data.items():
        if key not in section_types:
            raise ConfigError(f"unknown config section: {key}")
        kwargs[key] = _dataclass_from_dict(section_types[key], value, key)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            out = {}
            for f in dataclasses.fields(obj):
                key = "lambda" if f.name == "lambda_" else f.name
                out[key] = convert(getattr(obj, f.name))
            return out
        return obj
    return convert(cfg)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def merge_overrides(base: dict, overrides: dict) -> dict:
    """Recursively overlay one mapping onto another (copying, not mutating)."""
    merged = dict(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged


def _canonical_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def config_hash(cfg: RunConfig) -> str:
    return _canonical_hash(config_to_dict(cfg))


def data_hash(cfg: RunConfig) -> str:
    return _canonical_hash(config_to_dict(cfg)["data"])
