"""Neural-network primitives on top of :mod:`reportgen.autodiff.tensor`."""

from __future__ import annotations

import numpy as np

from ..errors import DataError, DimensionError, VocabularyError
from .tensor import Tensor, as_tensor, matmul, add


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _swish_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    return Tensor._make(xd * _sigmoid(xd), (x,), lambda g: (g * _swish_grad(xd),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over the last axis (population variance)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return Tensor._make(xhat, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis of {x.shape}"
        )
    return add(normalize(x, eps) * gain, bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].ravel()[0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {vocab}")

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._make(table.data[ids], (table,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.  x: [B, Cin, H, W], weight: [Cout, Cin, k, k]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    B, _, H, W = x.shape
    _, _, kh, kw = weight.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    out = np.zeros((B, wd.shape[0], Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + hspan : stride, j : j + wspan : stride]
            out += np.einsum("bchw,oc->bohw", patch, wd[:, :, i, j], optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hspan, stride), slice(j, j + wspan, stride))
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[sl], optimize=True)
                gxp[sl] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    weight = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = weight.sum()
    if count <= 0:
        raise DataError("cross_entropy: every target position is masked")
    logp = log_softmax(logits, axis=-1)
    lp = logp.data
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    value = -(picked * weight).sum() / count

    def backward(g):
        out = np.zeros_like(lp)
        np.put_along_axis(out, targets[..., None], (-g * weight / count)[..., None], axis=-1)
        return (out,)

    return Tensor._make(np.asarray(value), (logp,), backward)
