"""Transformer decoder: masked self-attention, cross-attention over the
encoder memory, position-wise FFN, each wrapped as LayerNorm(x + Dropout(f(x)))."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DecoderConfig
from .errors import ConfigError, ContractError, DimensionError, LengthError
from .initializers import ones, xavier_init, zeros

Params = Mapping[str, Tensor]


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    j = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, j / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def attention(P: Tensor, R: Tensor, S: Tensor, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """softmax(P R^T / sqrt(d_r)) S over the last two axes."""
    P, R, S = ad.as_tensor(P), ad.as_tensor(R), ad.as_tensor(S)
    if R.shape[-2] != S.shape[-2]:
        raise DimensionError(f"attention: keys {R.shape} and values {S.shape} differ in length")
    if P.shape[-1] != R.shape[-1]:
        raise DimensionError(f"attention: queries {P.shape} and keys {R.shape} differ in width")
    d_r = P.shape[-1]
    scores = ad.scale(ad.matmul(P, ad.swapaxes(R, -1, -2)), 1.0 / math.sqrt(d_r))
    if mask is not None:
        if np.any(np.all(np.isneginf(mask), axis=-1)):
            raise ContractError("attention: a query row has every key masked")
        scores = ad.add(scores, Tensor(mask))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, S)
    return (out, weights.data) if return_weights else out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = ad.reshape(x, (*lead, T, n_heads, d // n_heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return ad.transpose(x, axes)  # [..., h, T, dh]


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    x = ad.transpose(x, axes)  # [..., T, h, dh]
    *lead, T, h, dh = x.shape
    return ad.reshape(x, (*lead, T, h * dh))


def multi_head(P: Tensor, R: Tensor, S: Tensor, mask, params: Params, n_heads: int,
               record: list | None = None, name: str = "attn") -> Tensor:
    """Concat(head_1..head_h) W_Z with head_i = Attention(P W_i^P, R W_i^R, S W_i^S).

    ``params`` holds ``wq``, ``wk``, ``wv``, ``wo``; head i owns columns
    ``i*d_h:(i+1)*d_h`` of the three input projections.
    """
    d_model = params["wq"].shape[1]
    if d_model % n_heads:
        raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    q = _split_heads(ad.matmul(P, params["wq"]), n_heads)
    k = _split_heads(ad.matmul(R, params["wk"]), n_heads)
    v = _split_heads(ad.matmul(S, params["wv"]), n_heads)
    out, weights = attention(q, k, v, mask, return_weights=True)
    if record is not None:
        record.append((name, weights))
    return ad.matmul(_merge_heads(out), params["wo"])


def ffn(z: Tensor, V1: Tensor, c1: Tensor, V2: Tensor, c2: Tensor) -> Tensor:
    if z.shape[-1] != V1.shape[0] or V1.shape[1] != V2.shape[0]:
        raise DimensionError(f"ffn: input {z.shape} incompatible with V1 {V1.shape} / V2 {V2.shape}")
    return ad.linear(ad.relu(ad.linear(z, V1, c1)), V2, c2)


def _sub(params: Params, prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def decoder_layer(x: Tensor, memory: Tensor, cfg: DecoderConfig, params: Params, *,
                  training: bool = False, rng: np.random.Generator | None = None,
                  record: list | None = None, layer: int = 0) -> Tensor:
    """One post-norm decoder layer; ``params`` keys are relative to the layer."""
    T = x.shape[-2]
    if T > cfg.max_len:
        raise LengthError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    p = cfg.dropout_p

    def residual(inp, sublayer_out, norm):
        dropped = ad.dropout(sublayer_out, p, rng, training)
        return ad.layer_norm(ad.add(inp, dropped), params[f"{norm}.gain"], params[f"{norm}.bias"])

    mask = causal_mask(T)
    h = multi_head(x, x, x, mask, _sub(params, "self_attn"), cfg.n_heads, record, f"layer{layer}.self")
    x = residual(x, h, "norm1")
    h = multi_head(x, memory, memory, None, _sub(params, "cross_attn"), cfg.n_heads, record, f"layer{layer}.cross")
    x = residual(x, h, "norm2")
    h = ffn(x, params["ffn.v1"], params["ffn.c1"], params["ffn.v2"], params["ffn.c2"])
    return residual(x, h, "norm3")


class Decoder:
    def __init__(self, cfg: DecoderConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        if cfg.vocab_size < 1:
            raise ConfigError("decoder.vocab_size must be set from the vocabulary")
        self.cfg = cfg
        self.pe = positional_encoding(cfg.max_len, cfg.d_model)
        if params is None:
            params = self.init_params(rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        d, f, V = self.cfg.d_model, self.cfg.d_ff, self.cfg.vocab_size
        p: dict[str, Tensor] = {"decoder.embed": xavier_init((V, d), rng)}
        # Self-attention and FFN branches end in down-scaled projections: at
        # full gain each adds a position-independent component that the next
        # layer norm trades against the token signal, which then fades with
        # depth.  Cross-attention keeps full gain; it carries the image.
        branch_gain = 1.0 / math.sqrt(3 * self.cfg.n_layers)
        for i in range(self.cfg.n_layers):
            base = f"decoder.layers.{i}"
            for block in ("self_attn", "cross_attn"):
                for w in ("wq", "wk", "wv"):
                    p[f"{base}.{block}.{w}"] = xavier_init((d, d), rng)
                gain = branch_gain if block == "self_attn" else 1.0
                p[f"{base}.{block}.wo"] = xavier_init((d, d), rng, gain=gain)
            p[f"{base}.ffn.v1"] = xavier_init((d, f), rng)
            p[f"{base}.ffn.c1"] = zeros(f)
            p[f"{base}.ffn.v2"] = xavier_init((f, d), rng, gain=branch_gain)
            p[f"{base}.ffn.c2"] = zeros(d)
            for norm in ("norm1", "norm2", "norm3"):
                p[f"{base}.{norm}.gain"] = ones(d)
                p[f"{base}.{norm}.bias"] = zeros(d)
        p["decoder.out.weight"] = xavier_init((d, V), rng)
        p["decoder.out.bias"] = zeros(V)
        for name, t in p.items():
            t.name = name
        return p

    def hidden(self, tokens, memory: Tensor, *, training: bool = False,
               rng: np.random.Generator | None = None, record: list | None = None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        T = tokens.shape[-1]
        if T > self.cfg.max_len:
            raise LengthError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        memory = ad.as_tensor(memory)
        if memory.ndim == 2:
            memory = ad.reshape(memory, (1,) + memory.shape)
        x = ad.scale(ad.embedding_lookup(self.params["decoder.embed"], tokens), math.sqrt(self.cfg.d_model))
        x = ad.add(x, Tensor(self.pe[:T]))
        for i in range(self.cfg.n_layers):
            x = decoder_layer(x, memory, self.cfg, _sub(self.params, f"decoder.layers.{i}"),
                              training=training, rng=rng, record=record, layer=i)
        return x

    def logits(self, tokens, memory, **kwargs) -> Tensor:
        """[B, T] token ids (or [T]) and memory -> [B, T, vocab] logits."""
        h = self.hidden(tokens, memory, **kwargs)
        return ad.linear(h, self.params["decoder.out.weight"], self.params["decoder.out.bias"])

    __call__ = logits


def decode_logits(tokens, memory, cfg: DecoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Eval-mode logits [T, vocab] for one token sequence."""
    out = Decoder(cfg, params=params).logits(tokens, memory)
    return ad.reshape(out, out.shape[1:]) if np.ndim(tokens) == 1 else out
