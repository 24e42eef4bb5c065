"""Gradient verification: finite-difference checks of every primitive and of
every parameter group of a micro encoder-decoder model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .config import DecoderConfig, EncoderConfig
from .model import ReportModel
from .tokenizer import CLS_ID

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3

MICRO_ENCODER = dict(scales=[1.0, 0.5], channels=4, blocks_per_scale=1, bifpn_depth=1, pool_grid=2)
MICRO_DECODER = dict(d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=8, vocab_size=10, dropout_p=0.0)


@dataclass
class CheckLine:
    group: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, Tensor(weights)))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    n = lambda *s: rng.normal(size=s)
    pos = lambda *s: np.abs(rng.normal(size=s)) + 0.5
    idx = np.array([[0, 2, 1], [3, 3, 0]])
    targets = np.array([1, 0, 3])
    return {
        "add": (lambda a, b: ad.add(a, b), [n(3, 4), n(4)]),
        "sub": (lambda a, b: ad.sub(a, b), [n(3, 4), n(3, 1)]),
        "mul": (lambda a, b: ad.mul(a, b), [n(3, 4), n(3, 4)]),
        "div": (lambda a, b: ad.div(a, b), [n(3, 4), pos(4)]),
        "exp": (lambda a: ad.exp(a), [n(5)]),
        "log": (lambda a: ad.log(a), [pos(5)]),
        "sqrt": (lambda a: ad.sqrt(a), [pos(5)]),
        "matmul": (lambda a, b: ad.matmul(a, b), [n(2, 3, 4), n(4, 5)]),
        "sum": (lambda a: ad.tsum(a, axis=1, keepdims=True), [n(3, 4)]),
        "mean": (lambda a: ad.mean(a, axis=0), [n(3, 4)]),
        "reshape": (lambda a: ad.reshape(a, (6, 2)), [n(3, 4)]),
        "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [n(2, 3, 4)]),
        "getitem": (lambda a: ad.getitem(a, (slice(None), [0, 2, 2])), [n(3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n(2, 3), n(2, 2)]),
        "stack": (lambda a, b: ad.stack([a, b], axis=0), [n(2, 3), n(2, 3)]),
        "relu": (lambda a: ad.relu(a), [n(4, 4) + 0.05]),
        "sigmoid": (lambda a: ad.sigmoid(a), [n(4, 4)]),
        "swish": (lambda a: ad.swish(a), [n(4, 4)]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [n(3, 5)]),
        "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [n(3, 5)]),
        "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [n(3, 6), n(6), n(6)]),
        "linear": (lambda a, w, b: ad.linear(a, w, b), [n(3, 4), n(4, 2), n(2)]),
        "embedding": (lambda t: ad.embedding_lookup(t, idx), [n(4, 3)]),
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1), [n(1, 2, 5, 5), n(3, 2, 3, 3), n(3)]),
        "cross_entropy": (lambda z: ad.cross_entropy(z, targets), [n(3, 4)]),
    }


def check_primitives(seed: int = 0) -> list[CheckLine]:
    rng = np.random.default_rng(seed)
    lines = []
    for name, (build, arrays) in _primitive_cases(rng).items():
        params = {f"arg{i}": parameter(a) for i, a in enumerate(arrays)}
        args = list(params.values())
        weights = rng.normal(size=build(*args).shape)
        f = lambda: _weighted_sum(build(*args), weights)
        lines.append(CheckLine(name, ad.grad_check(f, params, eps=1e-6).max_error, PRIMITIVE_TOL))
    return lines


def micro_model(seed: int = 0) -> ReportModel:
    return ReportModel(EncoderConfig(**MICRO_ENCODER), DecoderConfig(**MICRO_DECODER), seed=seed)


def group_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


def check_model(seed: int = 0, max_entries: int | None = None) -> list[CheckLine]:
    """Worst relative error per parameter group of the micro model.

    With ``max_entries`` set, only that many random entries per tensor are probed.
    """
    model = micro_model(seed)
    rng = np.random.default_rng([seed, 7])
    images = rng.uniform(size=(2, 1, 12, 12))
    V = model.dec_cfg.vocab_size
    tokens = np.concatenate([np.full((2, 1), CLS_ID), rng.integers(4, V, size=(2, 5))], axis=1)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]

    def f():
        return ad.cross_entropy(model.logits(inputs, model.encode(images)), targets)

    result = ad.grad_check(f, model.params, eps=1e-6, max_entries=max_entries, rng=rng)
    worst: dict[str, float] = {}
    for name, err in result.per_param.items():
        g = group_of(name)
        worst[g] = max(worst.get(g, 0.0), err)
    return [CheckLine(g, e, MODEL_TOL) for g, e in worst.items()]
