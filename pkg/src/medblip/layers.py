"""Transformer building blocks shared by the encoders, the query bridge and the decoder.

Weights live in a ParamStore under dotted prefixes; every function here reads
them by name, so the same code serves frozen and learnable copies.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

NEG_INF = -1e9
INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_linear(store, name, rng, d_in, d_out, bias=True, frozen=False, dtype=np.float32, std=INIT_STD):
    store.add(f"{name}.w", trunc_normal(rng, (d_in, d_out), std).astype(dtype), frozen=frozen)
    if bias:
        store.add(f"{name}.b", np.zeros(d_out, dtype=dtype), frozen=frozen)


def init_layernorm(store, name, d, frozen=False, dtype=np.float32):
    store.add(f"{name}.g", np.ones(d, dtype=dtype), frozen=frozen)
    store.add(f"{name}.b", np.zeros(d, dtype=dtype), frozen=frozen)


def init_attention(store, name, rng, d, frozen=False, dtype=np.float32, std=INIT_STD):
    # no key bias: it shifts every score of a query equally, so softmax ignores it
    for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
        init_linear(store, f"{name}.{proj}", rng, d, d, bias=proj != "k_proj", frozen=frozen, dtype=dtype, std=std)


def init_mlp(store, name, rng, d, ratio=4, frozen=False, dtype=np.float32, std=INIT_STD):
    init_linear(store, f"{name}.fc1", rng, d, ratio * d, frozen=frozen, dtype=dtype, std=std)
    init_linear(store, f"{name}.fc2", rng, ratio * d, d, frozen=frozen, dtype=dtype, std=std)


def linear(store, name, x, lora=None):
    """``x @ W + b``; ``lora=(A, B, scale)`` adds ``scale * (x @ A^T) @ B^T``."""
    out = ad.matmul(x, store[f"{name}.w"])
    bname = f"{name}.b"
    if bname in store:
        out = ad.add(out, store[bname])
    if lora is not None:
        a, b, scale = lora
        delta = ad.matmul(ad.matmul(x, ad.transpose(a)), ad.transpose(b))
        out = ad.add(out, ad.scale(delta, scale))
    return out


def layernorm(store, name, x, eps=1e-5):
    return ad.layernorm(x, store[f"{name}.g"], store[f"{name}.b"], axis=-1, eps=eps)


def mlp(store, name, x):
    return linear(store, f"{name}.fc2", ad.gelu(linear(store, f"{name}.fc1", x)))


def _split_heads(x, heads):
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(store, name, x, kv, heads, mask=None, lora=None):
    """Multi-head attention of queries ``x`` (B, Nq, d) over ``kv`` (B, Nk, d).

    ``mask`` is boolean, broadcastable to (B, heads, Nq, Nk); True blocks a key.
    ``lora`` maps projection name ("q_proj"/"v_proj") to an adapter triple.
    """
    d = x.shape[-1]
    if kv.shape[-1] != d:
        raise ad.ShapeError(f"attention: query width {d} != key/value width {kv.shape[-1]}")
    if d % heads:
        raise ValueError(f"attention: width {d} not divisible by {heads} heads")
    lora = lora or {}
    q = _split_heads(linear(store, f"{name}.q_proj", x, lora.get("q_proj")), heads)
    k = _split_heads(linear(store, f"{name}.k_proj", kv, lora.get("k_proj")), heads)
    v = _split_heads(linear(store, f"{name}.v_proj", kv, lora.get("v_proj")), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d // heads))
    if mask is not None:
        scores = ad.masked_fill(scores, mask, NEG_INF)
    weights = ad.softmax(scores, axis=-1)
    out = _merge_heads(ad.matmul(weights, v))
    return linear(store, f"{name}.o_proj", out, lora.get("o_proj"))


def causal_mask(n):
    """(n, n) boolean mask, True above the diagonal (future positions)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def key_padding_mask(lengths, n):
    """(B, 1, 1, n) mask, True on padded key positions."""
    lengths = np.asarray(lengths)
    return (np.arange(n)[None, :] >= lengths[:, None])[:, None, None, :]


def init_encoder_block(store, name, rng, d, mlp_ratio=4, frozen=False, dtype=np.float32, std=INIT_STD):
    init_layernorm(store, f"{name}.ln1", d, frozen=frozen, dtype=dtype)
    init_attention(store, f"{name}.attn", rng, d, frozen=frozen, dtype=dtype, std=std)
    init_layernorm(store, f"{name}.ln2", d, frozen=frozen, dtype=dtype)
    init_mlp(store, f"{name}.mlp", rng, d, mlp_ratio, frozen=frozen, dtype=dtype, std=std)


def encoder_block(store, name, x, heads, mask=None, lora=None):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = layernorm(store, f"{name}.ln1", x)
    x = ad.add(x, attention(store, f"{name}.attn", h, h, heads, mask=mask, lora=lora))
    return ad.add(x, mlp(store, f"{name}.mlp", layernorm(store, f"{name}.ln2", x)))
