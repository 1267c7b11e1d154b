"""Generator (PreNet) and discriminator (AdvNet).

Parameters live in flat ordered dicts of named tensors, e.g.
``enc0.res.conv1.w``; the forward functions are pure in those dicts.

Layout of the generator for depth ``L`` and base width ``B``::

    stem 3x3 -> B
    level l = 0..L-1:  residual block (B*2^l)  ->  4x4/2 down conv to B*2^(l+1)
    level l = L-1..0:  nearest 2x + 3x3 up conv to B*2^l
                       attention gate on the skip (or plain skip)
                       concat -> residual block halving 2C -> C
    1x1 heads on the features at S/2^i, i = 1..ds_scales
    1x1 linear final head at full resolution
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    leaky_relu,
    linear,
    mean_spatial,
    mul,
    reshape,
    sigmoid,
    upsample_nearest2x,
)

CHANNEL_LAYOUT = ("ct", "ptv", "bladder", "femur_L", "femur_R", "small_intestine", "rectum")

# Stride-2 downsampling uses a 4x4 kernel with padding 1 so that even extents halve exactly.
DOWN_KERNEL = 4
DISC_LEVELS = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 7
    base_channels: int = 16
    depth: int = 4
    ds_scales: int = 3
    attention_enabled: bool = True
    residual_enabled: bool = True
    input_size: int = 64
    disc_channels: int = 16
    slope: float = 0.2

    def __post_init__(self):
        for name in ("in_channels", "base_channels", "depth", "ds_scales", "input_size", "disc_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^depth = {2 ** self.depth}")
        if self.ds_scales > self.depth:
            raise ConfigError(f"ds_scales {self.ds_scales} exceeds depth {self.depth}")
        if self.input_size % (2 ** DISC_LEVELS):
            raise ConfigError(f"input_size {self.input_size} must be divisible by {2 ** DISC_LEVELS} for AdvNet")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class PreNetOutput:
    final: Tensor
    heads: list[Tensor]
    attention: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------- init


def _conv_init(params, rng, name, cin, cout, k, dtype, gain):
    std = gain / math.sqrt(cin * k * k)
    params[f"{name}.w"] = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def init_prenet(config: ArchConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Kaiming fan-in initialised generator parameters, zero biases."""
    rng = np.random.default_rng(seed)
    act = math.sqrt(2.0 / (1.0 + config.slope ** 2))
    p: dict[str, Tensor] = {}
    _conv_init(p, rng, "stem", config.in_channels, config.base_channels, 3, dtype, act)
    for lvl in range(config.depth):
        c = config.channels(lvl)
        _conv_init(p, rng, f"enc{lvl}.res.conv1", c, c, 3, dtype, act)
        _conv_init(p, rng, f"enc{lvl}.res.conv2", c, c, 3, dtype, act)
        _conv_init(p, rng, f"enc{lvl}.down", c, 2 * c, DOWN_KERNEL, dtype, act)
    for lvl in reversed(range(config.depth)):
        c = config.channels(lvl)
        _conv_init(p, rng, f"dec{lvl}.up", 2 * c, c, 3, dtype, act)
        if config.attention_enabled:
            _conv_init(p, rng, f"dec{lvl}.att1", 2 * c, c, 3, dtype, act)
            _conv_init(p, rng, f"dec{lvl}.att2", c, c, 3, dtype, 1.0)
        _conv_init(p, rng, f"dec{lvl}.res.conv1", 2 * c, c, 3, dtype, act)
        _conv_init(p, rng, f"dec{lvl}.res.conv2", c, c, 3, dtype, act)
        if config.residual_enabled:
            _conv_init(p, rng, f"dec{lvl}.res.proj", 2 * c, c, 1, dtype, 1.0)
    for i in range(1, config.ds_scales + 1):
        _conv_init(p, rng, f"head{i}", config.channels(i), 1, 1, dtype, 1.0)
    _conv_init(p, rng, "final", config.base_channels, 1, 1, dtype, 1.0)
    return p


def init_advnet(config: ArchConfig, seed: int = 1, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    act = math.sqrt(2.0 / (1.0 + config.slope ** 2))
    p: dict[str, Tensor] = {}
    cin = config.in_channels + 1
    for lvl in range(DISC_LEVELS):
        cout = config.disc_channels * 2 ** lvl
        _conv_init(p, rng, f"conv{lvl}", cin, cout, DOWN_KERNEL, dtype, act)
        cin = cout
    p["fc.w"] = Tensor((rng.standard_normal((cin, 1)) / math.sqrt(cin)).astype(dtype), requires_grad=True)
    p["fc.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return p


def count_params(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def parameter_count(config: ArchConfig) -> int:
    return count_params(init_prenet(config))


# ---------------------------------------------------------------- blocks


def _conv(x, params, name, stride=1, padding=None):
    w = params[f"{name}.w"]
    if padding is None:
        padding = w.shape[2] // 2
    return conv2d(x, w, params[f"{name}.b"], stride=stride, padding=padding)


def residual_block(x: Tensor, params: dict[str, Tensor], prefix: str = "", slope: float = 0.2,
                   residual: bool = True) -> Tensor:
    """leaky(skip + conv(leaky(conv(x)))), skip = x or a 1x1 projection when widths differ.

    With ``residual=False`` the block is two plain conv + leaky layers.
    """
    h = leaky_relu(_conv(x, params, f"{prefix}conv1"), slope)
    h = _conv(h, params, f"{prefix}conv2")
    if not residual:
        return leaky_relu(h, slope)
    if f"{prefix}proj.w" in params:
        skip = _conv(x, params, f"{prefix}proj")
    elif x.shape[1] == h.shape[1]:
        skip = x
    else:
        raise ShapeError(f"residual_block: {x.shape[1]} -> {h.shape[1]} channels needs a projection")
    return leaky_relu(add(skip, h), slope)


def up_block(decoder_feat: Tensor, params, prefix: str = "", slope: float = 0.2) -> Tensor:
    return leaky_relu(_conv(upsample_nearest2x(decoder_feat), params, f"{prefix}up"), slope)


def _gate(encoder_feat, d_up, params, prefix, slope):
    h = leaky_relu(_conv(concat_channels([encoder_feat, d_up]), params, f"{prefix}att1"), slope)
    attn = sigmoid(_conv(h, params, f"{prefix}att2"))
    return mul(encoder_feat, attn), attn


def attention_gate(encoder_feat: Tensor, decoder_feat: Tensor, params: dict[str, Tensor],
                   prefix: str = "", slope: float = 0.2) -> tuple[Tensor, Tensor]:
    """Gate skip features by a per-channel spatial map computed from both paths.

    Returns ``(gated, attn_map)``; both have the encoder feature's shape.
    """
    n, c, h, w = encoder_feat.shape
    if decoder_feat.shape[2] * 2 != h or decoder_feat.shape[3] * 2 != w:
        raise ShapeError(
            f"attention_gate: decoder extent {decoder_feat.shape[2:]} is not half of encoder {(h, w)}")
    d_up = up_block(decoder_feat, params, prefix, slope)
    return _gate(encoder_feat, d_up, params, prefix, slope)


# ---------------------------------------------------------------- networks


def prenet_forward(x: Tensor, config: ArchConfig, params: dict[str, Tensor]) -> PreNetOutput:
    s = config.input_size
    if x.data.ndim != 4 or x.shape[1] != config.in_channels or x.shape[2:] != (s, s):
        raise ShapeError(f"prenet: expected [N,{config.in_channels},{s},{s}] input, got {x.shape}")
    slope = config.slope

    h = leaky_relu(_conv(x, params, "stem"), slope)
    skips = []
    for lvl in range(config.depth):
        h = residual_block(h, params, f"enc{lvl}.res.", slope, config.residual_enabled)
        skips.append(h)
        h = leaky_relu(_conv(h, params, f"enc{lvl}.down", stride=2, padding=1), slope)

    by_scale = {config.depth: h}
    attention = []
    for lvl in reversed(range(config.depth)):
        d_up = up_block(h, params, f"dec{lvl}.", slope)
        skip = skips[lvl]
        if config.attention_enabled:
            skip, attn = _gate(skip, d_up, params, f"dec{lvl}.", slope)
            attention.append(attn)
        h = residual_block(concat_channels([skip, d_up]), params, f"dec{lvl}.res.", slope,
                           config.residual_enabled)
        by_scale[lvl] = h

    heads = [_conv(by_scale[i], params, f"head{i}") for i in range(1, config.ds_scales + 1)]
    final = _conv(by_scale[0], params, "final")
    return PreNetOutput(final=final, heads=heads, attention=attention)


def advnet_forward(candidate: Tensor, condition: Tensor, params: dict[str, Tensor],
                   slope: float = 0.2) -> Tensor:
    """Score a dose map given its conditioning input; returns [N] values in (0, 1)."""
    if candidate.data.ndim != 4 or candidate.shape[1] != 1:
        raise ShapeError(f"advnet: candidate must be [N,1,S,S], got {candidate.shape}")
    if candidate.shape[0] != condition.shape[0] or candidate.shape[2:] != condition.shape[2:]:
        raise ShapeError(f"advnet: candidate {candidate.shape} does not match condition {condition.shape}")
    h = concat_channels([candidate, condition])
    for lvl in range(DISC_LEVELS):
        h = leaky_relu(_conv(h, params, f"conv{lvl}", stride=2, padding=1), slope)
    score = sigmoid(linear(mean_spatial(h), params["fc.w"], params["fc.b"]))
    return reshape(score, (candidate.shape[0],))
