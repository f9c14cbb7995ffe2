"""Query bridge: learnable queries cross-attend to image features; a separate text
transformer embeds descriptions and Q&A strings; a linear map emits the visual prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import (
    attention,
    encoder_block,
    init_attention,
    init_encoder_block,
    init_layernorm,
    init_linear,
    init_mlp,
    key_padding_mask,
    layernorm,
    linear,
    mlp,
    trunc_normal,
)


@dataclass(frozen=True)
class QFormerConfig:
    num_queries: int = 32
    width: int = 768
    layers: int = 12
    heads: int = 4
    text_layers: int | None = None
    max_text_len: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"query width {self.width} not divisible by {self.heads} heads")

    @property
    def n_text_layers(self):
        return self.layers if self.text_layers is None else self.text_layers


def init_qformer(store, rng, config, d_vis, vocab_size, lm_width, dtype=np.float32, std=0.02):
    d = config.width
    store.add("qformer.queries", trunc_normal(rng, (config.num_queries, d), std).astype(dtype))
    if d_vis != d:
        init_linear(store, "qformer.feat_proj", rng, d_vis, d, dtype=dtype, std=std)
    for i in range(config.layers):
        name = f"qformer.blocks.{i}"
        init_layernorm(store, f"{name}.ln_sa", d, dtype=dtype)
        init_attention(store, f"{name}.self_attn", rng, d, dtype=dtype, std=std)
        init_layernorm(store, f"{name}.ln_ca", d, dtype=dtype)
        init_layernorm(store, f"{name}.ln_kv", d, dtype=dtype)
        init_attention(store, f"{name}.cross_attn", rng, d, dtype=dtype, std=std)
        init_layernorm(store, f"{name}.ln_mlp", d, dtype=dtype)
        init_mlp(store, f"{name}.mlp", rng, d, config.mlp_ratio, dtype=dtype, std=std)
    store.add("text.tok_emb", trunc_normal(rng, (vocab_size, d), std).astype(dtype))
    store.add("text.pos", trunc_normal(rng, (config.max_text_len, d), std).astype(dtype))
    for i in range(config.n_text_layers):
        init_encoder_block(store, f"text.blocks.{i}", rng, d, config.mlp_ratio, dtype=dtype, std=std)
    init_linear(store, "prefix.proj", rng, d, lm_width, dtype=dtype, std=std)


def qformer_encode_image(store, feats, config):
    """(B, N, d_vis) image features -> (B, L, d_e) query outputs."""
    squeeze = feats.ndim == 2
    if squeeze:
        feats = ad.reshape(feats, (1,) + feats.shape)
    d = config.width
    if "qformer.feat_proj.w" in store:
        if feats.shape[-1] != store["qformer.feat_proj.w"].shape[0]:
            raise ad.ShapeError(
                f"qformer: feature width {feats.shape[-1]} != projection input "
                f"{store['qformer.feat_proj.w'].shape[0]}"
            )
        feats = linear(store, "qformer.feat_proj", feats)
    elif feats.shape[-1] != d:
        raise ad.ShapeError(f"qformer: feature width {feats.shape[-1]} != query width {d}")
    b = feats.shape[0]
    q = store["qformer.queries"]
    x = ad.add(ad.reshape(q, (1,) + q.shape), ad.Tensor(np.zeros((b, 1, d), dtype=q.dtype)))
    for i in range(config.layers):
        name = f"qformer.blocks.{i}"
        h = layernorm(store, f"{name}.ln_sa", x)
        x = ad.add(x, attention(store, f"{name}.self_attn", h, h, config.heads))
        kv = layernorm(store, f"{name}.ln_kv", feats)
        x = ad.add(x, attention(store, f"{name}.cross_attn", layernorm(store, f"{name}.ln_ca", x), kv, config.heads))
        x = ad.add(x, mlp(store, f"{name}.mlp", layernorm(store, f"{name}.ln_mlp", x)))
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def pad_batch(seqs, pad=0):
    """Right-pad 1-D id arrays into (B, T) plus their lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def text_encode(store, ids, config, lengths=None):
    """Embed (B, T) token ids; returns (sequence (B, T, d_e), pooled (B, d_e)).

    The pooled vector is the final state at position 0. Padded keys are masked.
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, t = ids.shape
    vocab = store["text.tok_emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"text_encode: token id outside vocabulary of size {vocab}")
    if t > config.max_text_len:
        raise ValueError(f"text_encode: sequence length {t} exceeds {config.max_text_len}")
    x = ad.add(ad.embedding(store["text.tok_emb"], ids), store["text.pos"][:t])
    mask = None
    if lengths is not None and np.any(np.asarray(lengths) < t):
        mask = key_padding_mask(lengths, t)
    for i in range(config.n_text_layers):
        x = encoder_block(store, f"text.blocks.{i}", x, config.heads, mask=mask)
    return x, x[:, 0, :]


def visual_prefix(store, query_out):
    """(B, L, d_e) -> (B, L, e) language-model prefix."""
    return linear(store, "prefix.proj", query_out)
