"""Configuration dataclasses and the JSON run-config loader.

The run config is one JSON document::

    {
      "profile": "default",
      "model":      {"encoder": {...}, "decoder": {...}},
      "train":      {"learning_rate": 0.001, "batch_size": 16, ...},
      "generation": {"beam_width": 3, "length_penalty_alpha": 0.6, "max_len": 48},
      "paths":      {"data": "...", "out": "..."}
    }

Keys mirror the hyperparameter table rows in snake_case.  A profile supplies
defaults that explicit keys in the document override.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

SEED_ENV = "REPORTGEN_SEED"


@dataclass
class EncoderConfig:
    scales: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    channels: int = 16
    blocks_per_scale: int = 2
    bifpn_depth: int = 3
    fusion_eps: float = 1e-4
    pool_grid: int | None = 4
    kernel_size: int = 3
    kind: str = "ac-bifpn"  # or "baseline"

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError("encoder.scales must not be empty")
        if any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ConfigError(f"encoder.scales must lie in (0, 1], got {self.scales}")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"encoder.scales must be strictly decreasing, got {self.scales}")
        if self.bifpn_depth < 1:
            raise ConfigError("encoder.bifpn_depth must be >= 1")
        if self.channels < 1 or self.blocks_per_scale < 1:
            raise ConfigError("encoder.channels and encoder.blocks_per_scale must be positive")
        if self.fusion_eps <= 0:
            raise ConfigError("encoder.fusion_eps must be positive")
        if self.pool_grid is not None and self.pool_grid < 1:
            raise ConfigError("encoder.pool_grid must be positive or null")
        if self.kind not in ("ac-bifpn", "baseline"):
            raise ConfigError(f"encoder.kind must be 'ac-bifpn' or 'baseline', got {self.kind!r}")


@dataclass
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 8
    d_ff: int | None = None
    max_len: int = 512
    vocab_size: int = 0
    dropout_p: float = 0.3
    finding_probe: bool = False

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    def validate(self) -> None:
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f"decoder.d_model must be a positive even number, got {self.d_model}")
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"decoder.d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.d_ff < 1 or self.max_len < 2:
            raise ConfigError("decoder.n_layers, d_ff must be positive and max_len >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"decoder.dropout_p must lie in [0, 1), got {self.dropout_p}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 50
    dropout_rate: float = 0.3
    gradient_clipping: float = 1.0
    scheduler_factor: float = 0.5
    scheduler_patience: int = 3
    min_lr: float = 1e-6
    early_stop_patience: int = 10
    seed: int = 0
    # train and validate on every case of the dataset (memorisation runs)
    overfit: bool = False

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be positive")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ConfigError("train.scheduler_factor must lie in (0, 1)")
        if self.gradient_clipping <= 0 or self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("train.gradient_clipping and patience values must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("train.dropout_rate must lie in [0, 1)")


@dataclass
class GenerationConfig:
    beam_width: int = 3
    length_penalty_alpha: float = 0.6
    max_len: int = 48

    def validate(self) -> None:
        if self.beam_width < 1:
            raise ConfigError("generation.beam_width must be >= 1")
        if self.max_len < 1:
            raise ConfigError("generation.max_len must be >= 1")


PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "default": {},
    # the alternate recipe from the training-procedure prose
    "rsna-paper": {"train": {"learning_rate": 0.0001, "batch_size": 8, "dropout_rate": 0.5}},
}


@dataclass
class RunConfig:
    profile: str = "default"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        self.train.validate()
        self.generation.validate()

    def to_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile,
            "model": {"encoder": dataclasses.asdict(self.encoder), "decoder": dataclasses.asdict(self.decoder)},
            "train": dataclasses.asdict(self.train),
            "generation": dataclasses.asdict(self.generation),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any], apply_env: bool = True) -> RunConfig:
        profile = doc.get("profile", "default")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        overrides = PROFILES[profile]
        model = doc.get("model", {})
        cfg = cls(
            profile=profile,
            encoder=_build(EncoderConfig, overrides.get("encoder", {}), model.get("encoder", {}), "model.encoder"),
            decoder=_build(DecoderConfig, overrides.get("decoder", {}), model.get("decoder", {}), "model.decoder"),
            train=_build(TrainConfig, overrides.get("train", {}), doc.get("train", {}), "train"),
            generation=_build(GenerationConfig, {}, doc.get("generation", {}), "generation"),
            paths=dict(doc.get("paths", {})),
        )
        # dropout lives in the training table; the decoder follows it unless set explicitly
        if "dropout_p" not in model.get("decoder", {}):
            cfg.decoder.dropout_p = cfg.train.dropout_rate
        if apply_env and os.environ.get(SEED_ENV):
            try:
                cfg.train.seed = int(os.environ[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        cfg.validate()
        return cfg


def _build(klass, *layers_and_section):
    *layers, section = layers_and_section
    known = {f.name for f in dataclasses.fields(klass)}
    merged: dict[str, Any] = {}
    for layer in layers:
        unknown = set(layer) - known
        if unknown:
            raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
        merged.update(layer)
    try:
        return klass(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad {section} section: {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc)
