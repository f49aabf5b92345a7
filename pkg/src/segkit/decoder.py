"""Lightweight decoder: per-level linear maps, zero-initialised residual convs, fusion, classifier.

Two residual directions are available.  ``literal`` adds
``ZeroConv_{C->C_i}(F_i)`` onto the backbone feature ``f_i`` (fused width
``sum(C_i)``); ``projected`` adds ``ZeroConv_{C_i->C}(f_i)`` onto the
projected feature ``F_i`` (fused width ``4C``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Params = Dict[str, Tensor]
VARIANTS = ("literal", "projected")


@dataclass
class DecoderConfig:
    C: int = 256
    n_cls: int = 150
    variant: str = "literal"
    zir_enabled: bool = True

    def __post_init__(self):
        if self.C < 1:
            raise ValueError(f"decoder.C must be >= 1, got {self.C}")
        if self.n_cls < 2:
            raise ValueError(f"decoder.n_cls must be >= 2, got {self.n_cls}")
        if self.variant not in VARIANTS:
            raise ValueError(f"decoder.variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def fused_channels(config: DecoderConfig, in_channels: Sequence[int]) -> int:
    if config.variant == "projected":
        return len(in_channels) * config.C
    return int(sum(in_channels))


def param_shapes(config: DecoderConfig, in_channels: Sequence[int]) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    C = config.C
    for i, ci in enumerate(in_channels):
        shapes[f"lin{i}.w"] = (C, ci)
        shapes[f"lin{i}.b"] = (C,)
    if config.zir_enabled:
        for i, ci in enumerate(in_channels):
            c_in, c_out = (C, ci) if config.variant == "literal" else (ci, C)
            shapes[f"zir{i}.w"] = (c_out, c_in)
            shapes[f"zir{i}.b"] = (c_out,)
    shapes["cls.w"] = (config.n_cls, fused_channels(config, in_channels))
    shapes["cls.b"] = (config.n_cls,)
    return shapes


def zir_param_count(config: DecoderConfig, in_channels: Sequence[int]) -> int:
    """Weights plus biases of the zero-initialised convs (whichever direction)."""
    C = config.C
    if config.variant == "literal":
        return sum(C * ci + ci for ci in in_channels)
    return sum(ci * C + C for ci in in_channels)


def count_params(config: DecoderConfig, in_channels: Sequence[int]) -> int:
    """Closed-form decoder parameter count."""
    C = config.C
    total = sum(ci * C + C for ci in in_channels)
    if config.zir_enabled:
        total += zir_param_count(config, in_channels)
    total += fused_channels(config, in_channels) * config.n_cls + config.n_cls
    return total


def init_params(config: DecoderConfig, in_channels: Sequence[int], rng=None, dtype="f32") -> Params:
    rng = np.random.default_rng(rng)
    dt = T.resolve_dtype(dtype)
    params: Params = {}
    for name, shape in param_shapes(config, in_channels).items():
        if name.startswith("zir") or name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# stages of the decoder
# ---------------------------------------------------------------------------

def linear_project(f: Tensor, params: Params, level: int) -> Tensor:
    return T.pointwise_conv(f, params[f"lin{level}.w"], params[f"lin{level}.b"])


def zir_residual(f: Tensor, F: Tensor, params: Params, config: DecoderConfig, level: int) -> Tensor:
    if f.shape[-2:] != F.shape[-2:]:
        raise ShapeError(f"residual inputs differ spatially: {f.shape} vs {F.shape}")
    base, branch_in = (f, F) if config.variant == "literal" else (F, f)
    if not config.zir_enabled:
        return base
    return base + T.pointwise_conv(branch_in, params[f"zir{level}.w"], params[f"zir{level}.b"])


def upsample_quarter(x: Tensor, height: int, width: int) -> Tensor:
    if height % 4 or width % 4:
        raise ShapeError(f"image size {height}x{width} must be a multiple of 4")
    return T.bilinear_resize(x, height // 4, width // 4)


def fuse_concat(features: List[Tensor]) -> Tensor:
    sizes = {f.shape[-2:] for f in features}
    if len(sizes) != 1:
        raise ShapeError(f"cannot concatenate features of spatial sizes {sorted(sizes)}")
    return T.concat(features, axis=-3)


def classify(m: Tensor, params: Params, height: int, width: int) -> Tensor:
    logits = T.pointwise_conv(m, params["cls.w"], params["cls.b"])
    return T.bilinear_resize(logits, height, width)


def decoder_forward(pyramid, params: Params, config: DecoderConfig) -> Tensor:
    """Logits ``[B?, n_cls, H, W]`` from a four-level pyramid (H = 4 x level-1 height)."""
    levels = list(pyramid)
    if len(levels) != 4:
        raise ShapeError(f"decoder expects 4 pyramid levels, got {len(levels)}")
    height, width = 4 * levels[0].shape[-2], 4 * levels[0].shape[-1]
    fused = []
    for i, f in enumerate(levels):
        F = linear_project(f, params, i)
        fused.append(upsample_quarter(zir_residual(f, F, params, config, i), height, width))
    return classify(fuse_concat(fused), params, height, width)
