"""Encoder + decoder bundle sharing one ordered parameter collection."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DecoderConfig, EncoderConfig
from .decoder import Decoder
from .encoder import build_encoder
from .errors import ConfigError
from .initializers import xavier_init, zeros
from .metrics import ALL_LABELS
from .tokenizer import CLS_ID


class ReportModel:
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, *, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        # separate streams so encoder variants share the same decoder init
        enc_rng, dec_rng, probe_rng = (np.random.default_rng([seed, k]) for k in range(3))
        enc_params = dec_params = None
        if params is not None:
            enc_params = {k: v for k, v in params.items() if k.startswith("encoder.")}
            dec_params = {k: v for k, v in params.items() if k.startswith("decoder.")}
        self.encoder = build_encoder(enc_cfg, dec_cfg.d_model, rng=enc_rng, params=enc_params)
        self.decoder = Decoder(dec_cfg, params=dec_params, rng=dec_rng)
        self.probe: dict[str, Tensor] = {}
        if dec_cfg.finding_probe:
            if params is not None:
                self.probe = {k: v for k, v in params.items() if k.startswith("probe.")}
            else:
                self.probe = {"probe.weight": xavier_init((dec_cfg.d_model, len(ALL_LABELS)), probe_rng),
                              "probe.bias": zeros(len(ALL_LABELS))}
        if params is not None:
            expected = {k: v.shape for k, v in ReportModel(enc_cfg, dec_cfg, seed=seed).params.items()}
            mismatched = sorted(set(params) ^ set(expected))
            if mismatched:
                raise ConfigError(f"checkpoint does not match model config; mismatched names: {mismatched[:5]}")
            for name, t in params.items():
                if t.shape != expected[name]:
                    raise ConfigError(f"checkpoint parameter {name} has shape {t.shape}, config expects "
                                      f"{expected[name]}")

    @property
    def enc_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def dec_cfg(self) -> DecoderConfig:
        return self.decoder.cfg

    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out.update(self.decoder.params)
        out.update(self.probe)
        return out

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def encode(self, images) -> Tensor:
        images = np.asarray(images, dtype=np.float64) if not isinstance(images, Tensor) else images
        if images.ndim == 3:
            images = images[None]
        return self.encoder(images)

    def logits(self, tokens, memory, *, training=False, rng=None, record=None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        first = tokens[..., 0] if tokens.ndim else tokens
        if np.any(first != CLS_ID):
            raise ValueError("decoder inputs must start with the CLS token")
        return self.decoder.logits(tokens, memory, training=training, rng=rng, record=record)

    def finding_probabilities(self, memory: Tensor) -> Tensor:
        """Optional multi-label sigmoid head over the mean-pooled memory."""
        if not self.probe:
            raise ConfigError("model was built without the finding probe (decoder.finding_probe=false)")
        pooled = ad.mean(memory, axis=-2)
        return ad.sigmoid(ad.linear(pooled, self.probe["probe.weight"], self.probe["probe.bias"]))
