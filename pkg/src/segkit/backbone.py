"""Hierarchical retention encoder producing a stride-4/8/16/32 feature pyramid."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .retention import RetentionParams, default_gammas, default_theta, masa_full, resa_decomposed
from .tensor import ShapeError, Tensor

Params = Dict[str, Tensor]

PATCH = 4
ATTENTION_MODES = ("decomposed", "full")


@dataclass
class BackboneConfig:
    stage_channels: List[int]
    stage_depths: List[int]
    heads: List[int]
    gammas: Optional[List[List[float]]] = None
    ffn_ratio: int = 4
    attention_modes: List[str] = field(default_factory=lambda: ["decomposed", "decomposed", "decomposed", "full"])
    rotate: bool = True
    softmax_scale: bool = True
    zero_init_branches: bool = False
    stem_norm: bool = True
    out_norm: bool = True
    in_channels: int = 3

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "heads", "attention_modes"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"backbone.{name} needs exactly 4 entries, got {getattr(self, name)}")
        chans = [int(c) for c in self.stage_channels]
        if any(c < 1 for c in chans) or any(b < a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"backbone.stage_channels must be positive and nondecreasing, got {chans}")
        if any(d < 0 for d in self.stage_depths):
            raise ValueError(f"backbone.stage_depths must be >= 0, got {self.stage_depths}")
        for c, h in zip(chans, self.heads):
            if h < 1 or c % h:
                raise ValueError(f"channel count {c} is not divisible by head count {h}")
            if (c // h) % 2:
                raise ValueError(f"head dimension {c // h} (= {c}/{h}) must be even for rotation")
        for m in self.attention_modes:
            if m not in ATTENTION_MODES:
                raise ValueError(f"attention mode {m!r} not in {ATTENTION_MODES}")
        if self.gammas is not None:
            if len(self.gammas) != 4:
                raise ValueError("backbone.gammas needs one list per stage")
            for g, h in zip(self.gammas, self.heads):
                if len(g) != h or any(not 0 < x <= 1 for x in g):
                    raise ValueError(f"stage gammas {g} must be {h} values in (0, 1]")

    def stage_gammas(self, i: int) -> np.ndarray:
        if self.gammas is None:
            return default_gammas(self.heads[i])
        return np.asarray(self.gammas[i], dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)


# Named sizes.  Tiny..Large approximate the public Vision RetNet settings and are
# placeholders to edit; micro is the desk-scale default used by the tests.
NAMED_CONFIGS = {
    "micro": dict(stage_channels=[16, 32, 64, 128], stage_depths=[1, 1, 2, 1], heads=[1, 2, 4, 4]),
    "tiny": dict(stage_channels=[64, 128, 256, 512], stage_depths=[2, 2, 8, 2], heads=[4, 4, 8, 16]),
    "small": dict(stage_channels=[64, 128, 256, 512], stage_depths=[3, 4, 18, 4], heads=[4, 4, 8, 16]),
    "base": dict(stage_channels=[80, 160, 320, 512], stage_depths=[4, 8, 25, 8], heads=[5, 5, 10, 16]),
    "large": dict(stage_channels=[112, 224, 448, 640], stage_depths=[4, 8, 25, 8], heads=[7, 7, 14, 20]),
}


def named_config(name: str, **overrides) -> BackboneConfig:
    try:
        base = dict(NAMED_CONFIGS[name.lower()])
    except KeyError:
        raise ValueError(f"unknown backbone size {name!r}; choose from {sorted(NAMED_CONFIGS)}") from None
    base.update(overrides)
    return BackboneConfig(**base)


@dataclass
class FeaturePyramid:
    levels: List[Tensor]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"a feature pyramid has 4 levels, got {len(self.levels)}")

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return 4

    @property
    def channels(self) -> List[int]:
        return [f.shape[-3] for f in self.levels]

    def shapes(self) -> list:
        return [tuple(f.shape[-3:]) for f in self.levels]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(config: BackboneConfig) -> Dict[str, tuple]:
    """Every backbone weight name with its shape, in creation order."""
    shapes: Dict[str, tuple] = {}
    c = config.stage_channels
    shapes["stem.w"] = (c[0], config.in_channels * PATCH * PATCH)
    shapes["stem.b"] = (c[0],)
    if config.stem_norm:
        shapes["stem.ln.w"] = (c[0],)
        shapes["stem.ln.b"] = (c[0],)
    for i in range(4):
        ch, heads = c[i], config.heads[i]
        dk = ch // heads
        hidden = ch * config.ffn_ratio
        for j in range(config.stage_depths[i]):
            p = f"s{i}.b{j}."
            shapes[p + "ln1.w"] = (ch,)
            shapes[p + "ln1.b"] = (ch,)
            for name in ("wq", "wk", "wv"):
                shapes[p + "attn." + name] = (heads, ch, dk)
            shapes[p + "attn.wo"] = (ch, ch)
            shapes[p + "attn.bo"] = (ch,)
            shapes[p + "ln2.w"] = (ch,)
            shapes[p + "ln2.b"] = (ch,)
            shapes[p + "ffn.w1"] = (ch, hidden)
            shapes[p + "ffn.b1"] = (hidden,)
            shapes[p + "ffn.w2"] = (hidden, ch)
            shapes[p + "ffn.b2"] = (ch,)
        if config.out_norm:
            shapes[f"out{i}.ln.w"] = (ch,)
            shapes[f"out{i}.ln.b"] = (ch,)
        if i < 3:
            shapes[f"down{i}.w"] = (c[i + 1], 4 * ch)
            shapes[f"down{i}.b"] = (c[i + 1],)
    return shapes


def count_params(config: BackboneConfig) -> int:
    """Closed-form parameter count."""
    c, r = config.stage_channels, config.ffn_ratio
    total = c[0] * config.in_channels * PATCH * PATCH + c[0]
    if config.stem_norm:
        total += 2 * c[0]
    for i in range(4):
        ch = c[i]
        per_block = (
            2 * ch  # ln1
            + 3 * ch * ch  # q, k, v over all heads
            + ch * ch + ch  # output projection
            + 2 * ch  # ln2
            + ch * r * ch + r * ch  # ffn in
            + r * ch * ch + ch  # ffn out
        )
        total += config.stage_depths[i] * per_block
        if config.out_norm:
            total += 2 * ch
        if i < 3:
            total += 4 * ch * c[i + 1] + c[i + 1]
    return total


def init_params(config: BackboneConfig, rng=None, dtype="f32") -> Params:
    """Fan-in scaled normal weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(rng)
    dt = T.resolve_dtype(dtype)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if name.endswith(("ln.w", "ln1.w", "ln2.w")):
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        elif config.zero_init_branches and leaf in ("wo", "w2"):
            arr = np.zeros(shape)
        else:
            # [out, in] conv weights, [in, out] token linears, [heads, in, dk] projections
            fan_in = shape[1] if name.startswith(("stem", "down")) or len(shape) == 3 else shape[0]
            arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _check_image(image: Tensor, config: BackboneConfig) -> None:
    if image.ndim not in (3, 4) or image.shape[-3] != config.in_channels:
        raise ShapeError(f"expected image [B?, {config.in_channels}, H, W], got {image.shape}")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        ph, pw = -h % 32, -w % 32
        raise ShapeError(
            f"image size {h}x{w} is not a multiple of 32; pad by ({ph}, {pw}) pixels to {h + ph}x{w + pw}"
        )


def space_to_depth(x: Tensor, k: int) -> Tensor:
    """[B, C, h, w] -> [B, C*k*k, h/k, w/k] by folding k x k neighbourhoods into channels."""
    b, c, h, w = x.shape
    y = T.reshape(x, (b, c, h // k, k, w // k, k))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (b, c * k * k, h // k, w // k))


def patch_embed(image: Tensor, params: Params, config: BackboneConfig) -> Tensor:
    """Stride-4 patch projection: [B?, 3, H, W] -> [B?, C_1, H/4, W/4]."""
    _check_image(image, config)
    batched = image.ndim == 4
    x = image if batched else T.reshape(image, (1,) + image.shape)
    y = T.pointwise_conv(space_to_depth(x, PATCH), params["stem.w"], params["stem.b"])
    if config.stem_norm:
        y = channel_norm(y, params["stem.ln.w"], params["stem.ln.b"])
    return y if batched else T.reshape(y, y.shape[1:])


def channel_norm(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Layer norm over the channel axis of ``[B, C, h, w]``."""
    y = T.layer_norm(T.transpose(x, (0, 2, 3, 1)), weight, bias)
    return T.transpose(y, (0, 3, 1, 2))


def to_tokens(x: Tensor) -> Tensor:
    """[B, C, h, w] -> [B, h*w, C]."""
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c, h, w))


def block_params(params: Params, prefix: str) -> Params:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


def block_forward(
    x: Tensor,
    bp: Params,
    h: int,
    w: int,
    gamma: np.ndarray,
    mode: str = "decomposed",
    rotate: bool = True,
    softmax_scale: bool = True,
) -> Tensor:
    """Pre-norm residual block on tokens ``x[B, h*w, C]``.

    ``x + Attn(LN(x))`` followed by ``x + FFN(LN(x))``; ``bp`` holds the
    block's weights keyed without their stage prefix.
    """
    wq = bp["attn.wq"]
    rp = RetentionParams(
        wq, bp["attn.wk"], bp["attn.wv"], gamma, default_theta(wq.shape[2]) if rotate else None, softmax_scale
    )
    y = T.layer_norm(x, bp["ln1.w"], bp["ln1.b"])
    attend = resa_decomposed if mode == "decomposed" else masa_full
    a = T.linear(attend(y, rp, h, w), bp["attn.wo"], bp["attn.bo"])
    x = x + a
    y = T.layer_norm(x, bp["ln2.w"], bp["ln2.b"])
    f = T.linear(T.gelu(T.linear(y, bp["ffn.w1"], bp["ffn.b1"])), bp["ffn.w2"], bp["ffn.b2"])
    return x + f


def backbone_forward(image: Tensor, config: BackboneConfig, params: Params) -> FeaturePyramid:
    """Encode ``image [B?, 3, H, W]`` into features at strides 4, 8, 16, 32."""
    batched = image.ndim == 4
    x = patch_embed(image, params, config)
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    levels = []
    for i in range(4):
        _, _, h, w = x.shape
        tokens = to_tokens(x)
        gamma = config.stage_gammas(i)
        for j in range(config.stage_depths[i]):
            tokens = block_forward(
                tokens,
                block_params(params, f"s{i}.b{j}."),
                h,
                w,
                gamma,
                config.attention_modes[i],
                config.rotate,
                config.softmax_scale,
            )
        x = from_tokens(tokens, h, w)
        out = channel_norm(x, params[f"out{i}.ln.w"], params[f"out{i}.ln.b"]) if config.out_norm else x
        levels.append(out if batched else T.reshape(out, out.shape[1:]))
        if i < 3:
            x = T.pointwise_conv(space_to_depth(x, 2), params[f"down{i}.w"], params[f"down{i}.b"])
    return FeaturePyramid(levels)
