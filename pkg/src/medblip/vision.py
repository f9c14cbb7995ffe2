"""Frozen, seeded transformer encoder standing in for a pre-trained vision backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import encoder_block, init_encoder_block
from .params import ParamStore


@dataclass(frozen=True)
class VisionEncoderConfig:
    layers: int = 2
    heads: int = 4
    width: int = 64
    mlp_ratio: int = 4
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"vision width {self.width} not divisible by {self.heads} heads")


def init_frozen(config, store=None, dtype=np.float32):
    """Register ``vision.*`` weights drawn from ``config.seed``, all frozen."""
    store = ParamStore(config.seed) if store is None else store
    rng = np.random.default_rng(config.seed)
    for i in range(config.layers):
        init_encoder_block(store, f"vision.blocks.{i}", rng, config.width, config.mlp_ratio,
                           frozen=True, dtype=dtype, std=config.init_std)
    return store


def vision_param_count(config):
    d, r = config.width, config.mlp_ratio
    per_layer = 4 * d * d + 3 * d + (d * r * d + r * d) + (r * d * d + d) + 4 * d
    return config.layers * per_layer


def encode_image(tokens, store, config):
    """Run the encoder stack over (B, N, d) or (N, d) tokens; row count is preserved."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    if tokens.shape[-1] != config.width:
        raise ad.ShapeError(f"encode_image: token width {tokens.shape[-1]} != encoder width {config.width}")
    x = tokens
    for i in range(config.layers):
        x = encoder_block(store, f"vision.blocks.{i}", x, config.heads)
    return ad.reshape(x, x.shape[1:]) if squeeze else x
