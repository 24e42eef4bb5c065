"""Central finite-difference verification of backward rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class NondeterministicFunctionError(ContractError):
    """The function under test returned different values for identical inputs."""


@dataclass
class GradCheckResult:
    max_error: float
    per_param: dict[str, float] = field(default_factory=dict)

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``f`` is re-evaluated with each probed entry nudged by +/- eps; it must be
    deterministic (dropout off).  With ``max_entries`` set, at most that many
    randomly chosen entries of each parameter are probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = f()
    base = loss.item()
    if f().item() != base:
        raise NondeterministicFunctionError("f() is not deterministic; disable dropout and fix seeds")
    loss.backward()

    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(indices))
        for k, idx in enumerate(indices):
            orig = flat[idx]
            flat[idx] = orig + eps
            plus = f().item()
            flat[idx] = orig - eps
            minus = f().item()
            flat[idx] = orig
            numeric[k] = (plus - minus) / (2.0 * eps)
        err = relative_error(analytic.reshape(-1)[indices], numeric)
        per_param[name] = float(err.max()) if err.size else 0.0
    return GradCheckResult(max(per_param.values(), default=0.0), per_param)
