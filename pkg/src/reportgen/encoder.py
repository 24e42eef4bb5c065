"""Multi-scale pyramid encoder (AC-BiFPN) and a single-scale baseline.

Pipeline: resize the scan to every scale, run a shared stack of stride-2
conv + Swish blocks on each copy, fuse the levels with repeated top-down /
bottom-up passes, gate each level with a spatial attention map, pool every
level to a fixed grid and project the positions to ``d_model``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .config import EncoderConfig
from .errors import ConfigError
from .decoder import positional_encoding
from .initializers import ones, xavier_init, zeros

Params = Mapping[str, Tensor]


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    fused: Tensor | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def spatial_sizes(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[-2:]) for t in self.levels]


# -- resampling ------------------------------------------------------------


def _ceil_scaled(n: int, factor: float) -> int:
    return max(1, math.ceil(round(n * factor, 9)))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows interpolate ``n_in`` samples at ``n_out`` half-pixel-aligned centres."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Average pooling: 2-wide windows when halving, adaptive bins otherwise."""
    m = np.zeros((n_out, n_in))
    halving = n_out == math.ceil(n_in / 2)
    for i in range(n_out):
        if halving:
            lo, hi = 2 * i, min(2 * i + 2, n_in)
        else:
            lo = (i * n_in) // n_out
            hi = max(-(-((i + 1) * n_in) // n_out), lo + 1)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return ad.matmul(ad.matmul(Tensor(rows), x), Tensor(cols.T.copy()))


def resize(image, factor: float) -> Tensor:
    """Bilinear resize of [..., H, W] to [..., ceil(H f), ceil(W f)]."""
    if not 0.0 < factor <= 1.0:
        raise ConfigError(f"resize factor must lie in (0, 1], got {factor}")
    image = ad.as_tensor(image)
    H, W = image.shape[-2:]
    return resize_to(image, (_ceil_scaled(H, factor), _ceil_scaled(W, factor)))


def resize_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    if (H, W) == tuple(size):
        return x
    return _separable(x, bilinear_matrix(H, size[0]), bilinear_matrix(W, size[1]))


def pool_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    if (H, W) == tuple(size):
        return x
    return _separable(x, pool_matrix(H, size[0]), pool_matrix(W, size[1]))


# -- building blocks -------------------------------------------------------


def extract_features(image: Tensor, layers: list[tuple[Tensor, Tensor]], stride: int = 2) -> Tensor:
    """Stack of conv + Swish blocks; ``image`` is [B, 1, H, W] (or [1, H, W])."""
    x = ad.as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    for weight, bias in layers:
        x = ad.swish(ad.conv2d(x, weight, bias, stride=stride, padding=weight.shape[-1] // 2))
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def fusion_coefficients(weights: Tensor, eps: float = 1e-4) -> Tensor:
    """Fast normalised fusion weights relu(w_i) / sum_j relu(w_j).

    When the rectified weights sum below ``eps`` the node falls back to a
    uniform average, so the coefficients always form a convex combination.
    """
    r = ad.relu(weights)
    total = float(r.data.sum())
    if total < eps:
        return Tensor(np.full(weights.shape, 1.0 / weights.shape[0]))
    return ad.div(r, ad.tsum(r))


def weighted_fusion(inputs: list[Tensor], weights: Tensor, eps: float = 1e-4) -> tuple[Tensor, np.ndarray]:
    coeffs = fusion_coefficients(weights, eps)
    out = None
    for i, x in enumerate(inputs):
        term = ad.mul(coeffs[i], x)
        out = term if out is None else ad.add(out, term)
    return out, coeffs.data.copy()


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer norm across the channels of every position of a [B, C, H, W] map."""
    y = ad.layer_norm(ad.transpose(x, (0, 2, 3, 1)), gain, bias)
    return ad.transpose(y, (0, 3, 1, 2))


def _fusion_node(inputs, params: Params, prefix: str, eps: float, record: list | None):
    fused, coeffs = weighted_fusion(inputs, params[f"{prefix}.w"], eps)
    if record is not None:
        record.append((prefix, coeffs))
    conv = ad.conv2d(fused, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride=1,
                     padding=params[f"{prefix}.conv.weight"].shape[-1] // 2)
    # without it the activations shrink by about half per stacked node
    conv = channel_norm(conv, params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"])
    return ad.swish(conv)


def bifpn_fuse(pyramid: FeaturePyramid, params: Params, depth: int, eps: float = 1e-4,
               prefix: str = "encoder.bifpn") -> FeaturePyramid:
    """``depth`` rounds of top-down then bottom-up weighted fusion."""
    levels = list(pyramid.levels)
    meta = dict(pyramid.metadata)
    if len(levels) < 2:
        meta["warning"] = "single level: fusion skipped"
        return FeaturePyramid(levels, pyramid.fused, meta)
    record: list = meta.setdefault("fusion_coefficients", [])
    L = len(levels)
    for r in range(depth):
        p = f"{prefix}.{r}"
        td = [None] * L
        td[L - 1] = levels[L - 1]
        for lvl in range(L - 2, -1, -1):
            up = resize_to(td[lvl + 1], levels[lvl].shape[-2:])
            td[lvl] = _fusion_node([levels[lvl], up], params, f"{p}.td{lvl}", eps, record)
        out = [None] * L
        out[0] = td[0]
        for lvl in range(1, L):
            down = pool_to(out[lvl - 1], levels[lvl].shape[-2:])
            inputs = [levels[lvl], td[lvl], down] if lvl < L - 1 else [levels[lvl], down]
            out[lvl] = _fusion_node(inputs, params, f"{p}.out{lvl}", eps, record)
        levels = out
    return FeaturePyramid(levels, pyramid.fused, meta)


def spatial_gate(x: Tensor, proj: Tensor) -> tuple[Tensor, np.ndarray]:
    """Residual spatial attention: x * (H W softmax_positions(x . proj)).

    A uniform score map gives a gate of exactly one.
    """
    B, C, H, W = x.shape
    flat = ad.transpose(ad.reshape(x, (B, C, H * W)), (0, 2, 1))  # [B, HW, C]
    logits = ad.reshape(ad.matmul(flat, proj), (B, H * W))
    scores = ad.softmax(logits, axis=-1)
    gate = ad.reshape(ad.scale(scores, float(H * W)), (B, 1, H, W))
    return ad.mul(x, gate), scores.data


def image_attention(pyramid: FeaturePyramid, params: Params, prefix: str = "encoder.attn") -> FeaturePyramid:
    out, maps = [], []
    for lvl, x in enumerate(pyramid.levels):
        gated, scores = spatial_gate(x, params[f"{prefix}.{lvl}.weight"])
        out.append(gated)
        maps.append(scores)
    meta = dict(pyramid.metadata)
    meta["attention_scores"] = maps
    return FeaturePyramid(out, pyramid.fused, meta)


def flatten_levels(levels: list[Tensor], grid: int | None) -> Tensor:
    """Pool every [B, C, H, W] level to grid x grid and stack positions: [B, N, C]."""
    parts = []
    for x in levels:
        if grid is not None:
            x = pool_to(x, (grid, grid))
        B, C, H, W = x.shape
        parts.append(ad.transpose(ad.reshape(x, (B, C, H * W)), (0, 2, 1)))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


# -- encoders --------------------------------------------------------------


def level_sizes(cfg: EncoderConfig, image_size: tuple[int, int], scales=None) -> list[tuple[int, int]]:
    sizes = []
    for s in scales if scales is not None else cfg.scales:
        h, w = _ceil_scaled(image_size[0], s), _ceil_scaled(image_size[1], s)
        for _ in range(cfg.blocks_per_scale):
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        sizes.append((h, w))
    return sizes


def minimum_image_size(cfg: EncoderConfig, scales=None) -> int:
    need = cfg.pool_grid or 1
    n = 1
    while min(min(s) for s in level_sizes(cfg, (n, n), scales)) < need:
        n += 1
    return n


class Encoder:
    """Pyramid encoder; ``params`` is an ordered name -> Tensor mapping."""

    kind = "ac-bifpn"

    def __init__(self, cfg: EncoderConfig, d_model: int, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        self.d_model = d_model
        if params is None:
            params = self.init_params(rng if rng is not None else np.random.default_rng(0))
        self.params = params

    @property
    def scales(self) -> list[float]:
        return list(self.cfg.scales)

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg, C, k = self.cfg, self.cfg.channels, self.cfg.kernel_size
        p: dict[str, Tensor] = {}
        c_in = 1
        for i in range(cfg.blocks_per_scale):
            p[f"encoder.extract.{i}.weight"] = xavier_init((C, c_in, k, k), rng)
            p[f"encoder.extract.{i}.bias"] = zeros(C)
            c_in = C
        p.update(self._init_head(rng))
        p["encoder.proj.weight"] = xavier_init((C, self.d_model), rng)
        p["encoder.proj.bias"] = zeros(self.d_model)
        p["encoder.norm.gain"] = ones(self.d_model)
        p["encoder.norm.bias"] = zeros(self.d_model)
        if cfg.pool_grid is not None:
            n_mem = len(self.scales) * cfg.pool_grid ** 2
            p["encoder.pos.bias"] = parameter(positional_encoding(n_mem, self.d_model))
        for name, t in p.items():
            t.name = name
        return p

    def _init_head(self, rng) -> dict[str, Tensor]:
        cfg, C, k = self.cfg, self.cfg.channels, self.cfg.kernel_size
        L = len(cfg.scales)
        p: dict[str, Tensor] = {}
        if L >= 2:
            for r in range(cfg.bifpn_depth):
                nodes = [(f"td{lvl}", 2) for lvl in range(L - 2, -1, -1)]
                nodes += [(f"out{lvl}", 3 if lvl < L - 1 else 2) for lvl in range(1, L)]
                for node, fan in nodes:
                    base = f"encoder.bifpn.{r}.{node}"
                    p[f"{base}.w"] = ones(fan)
                    p[f"{base}.conv.weight"] = xavier_init((C, C, k, k), rng)
                    p[f"{base}.conv.bias"] = zeros(C)
                    p[f"{base}.norm.gain"] = ones(C)
                    p[f"{base}.norm.bias"] = zeros(C)
        for lvl in range(L):
            p[f"encoder.attn.{lvl}.weight"] = xavier_init((C, 1), rng)
        return p

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def extract_layers(self) -> list[tuple[Tensor, Tensor]]:
        return [(self.params[f"encoder.extract.{i}.weight"], self.params[f"encoder.extract.{i}.bias"])
                for i in range(self.cfg.blocks_per_scale)]

    def check_input(self, images: np.ndarray | Tensor) -> None:
        H, W = images.shape[-2:]
        need = minimum_image_size(self.cfg, self.scales)
        if min(H, W) < need:
            raise ConfigError(f"image {H}x{W} too small for this encoder; minimum size is {need}x{need}")

    def pyramid(self, images: Tensor) -> FeaturePyramid:
        layers = self.extract_layers()
        levels = [extract_features(resize(images, s), layers) for s in self.scales]
        return FeaturePyramid(levels)

    def project(self, levels: list[Tensor]) -> Tensor:
        """Pooled positions -> d_model, layer-normed to the decoder's scale.

        With grid pooling a learned per-token bias, initialised to the
        sinusoidal code of the token index (level-major, then row-major),
        lets cross-attention tell where a feature came from.
        """
        p = self.params
        memory = ad.linear(flatten_levels(levels, self.cfg.pool_grid), p["encoder.proj.weight"], p["encoder.proj.bias"])
        memory = ad.layer_norm(memory, p["encoder.norm.gain"], p["encoder.norm.bias"])
        if "encoder.pos.bias" in p:
            memory = ad.add(memory, p["encoder.pos.bias"])
        return memory

    def forward(self, images, return_pyramid: bool = False):
        """images: [B, 1, H, W] -> memory [B, N_mem, d_model]."""
        images = ad.as_tensor(images)
        self.check_input(images)
        pyr = self.pyramid(images)
        pyr = bifpn_fuse(pyr, self.params, self.cfg.bifpn_depth, self.cfg.fusion_eps)
        pyr = image_attention(pyr, self.params)
        memory = self.project(pyr.levels)
        pyr.fused = memory
        return (memory, pyr) if return_pyramid else memory

    __call__ = forward

    def encode(self, image) -> Tensor:
        """Single image [1, H, W] -> memory [N_mem, d_model]."""
        image = ad.as_tensor(image)
        memory = self.forward(ad.reshape(image, (1,) + image.shape))
        return ad.reshape(memory, memory.shape[1:])

    def memory_length(self, image_size=(64, 64)) -> int:
        if self.cfg.pool_grid is not None:
            return len(self.scales) * self.cfg.pool_grid ** 2
        return sum(h * w for h, w in level_sizes(self.cfg, image_size, self.scales))


class BaselineEncoder(Encoder):
    """Single scale, no fusion, no attention: conv stack -> pool -> projection."""

    kind = "baseline"

    @property
    def scales(self) -> list[float]:
        return [1.0]

    def _init_head(self, rng) -> dict[str, Tensor]:
        return {}

    def forward(self, images, return_pyramid: bool = False):
        images = ad.as_tensor(images)
        self.check_input(images)
        pyr = FeaturePyramid([extract_features(images, self.extract_layers())])
        memory = self.project(pyr.levels)
        pyr.fused = memory
        return (memory, pyr) if return_pyramid else memory

    __call__ = forward


def build_encoder(cfg: EncoderConfig, d_model: int, rng=None, params=None) -> Encoder:
    klass = BaselineEncoder if cfg.kind == "baseline" else Encoder
    return klass(cfg, d_model, params=params, rng=rng)


def encode(image, cfg: EncoderConfig, params: dict[str, Tensor], d_model: int | None = None) -> Tensor:
    """Functional entry point: encode one [1, H, W] image with fixed parameters."""
    d_model = d_model or params["encoder.proj.weight"].shape[1]
    return build_encoder(cfg, d_model, params=params).encode(image)


def baseline_encode(image, cfg: EncoderConfig, params: dict[str, Tensor], d_model: int | None = None) -> Tensor:
    d_model = d_model or params["encoder.proj.weight"].shape[1]
    return BaselineEncoder(cfg, d_model, params=params).encode(image)
