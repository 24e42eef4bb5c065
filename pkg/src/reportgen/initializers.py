from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, parameter


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """(fan_in, fan_out) for [in, out] matrices and [out, in, kh, kw] kernels."""
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    if len(shape) == 1:
        return shape[0], shape[0]
    raise ValueError(f"no fan convention for shape {shape}")


def xavier_init(shape, rng: np.random.Generator, name: str | None = None, gain: float = 1.0) -> Tensor:
    """Glorot-uniform weights in +/- gain * sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(shape)
    fan_in, fan_out = fans(shape)
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def ones(shape, name: str | None = None) -> Tensor:
    return parameter(np.ones(shape), name=name)
