"""Causal transformer decoder with optional low-rank adapters on q/v projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import EOS, PAD
from .layers import causal_mask, encoder_block, init_encoder_block, init_layernorm, layernorm, trunc_normal

REGULAR = "regular"
ALTERNATIVE = "alternative"


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    width: int = 64
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"LM width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple = ("q_proj", "v_proj")

    @property
    def scale(self):
        return self.alpha / self.rank


@dataclass
class AssembledInput:
    """Batch of prompt sequences, right-padded.

    ``embeds`` (B, T, e) holds token embeddings and prefix rows before positions
    are added; ``ids`` (B, T) has -1 on prefix rows and PAD past ``lengths``;
    ``answer_mask`` is True exactly on answer tokens.
    """

    embeds: ad.Tensor
    ids: np.ndarray
    answer_mask: np.ndarray
    lengths: np.ndarray

    @property
    def targets(self):
        return np.where(self.answer_mask, self.ids, PAD)


def init_lm(store, rng, config, dtype=np.float32, std=0.02):
    store.add("lm.tok_emb", trunc_normal(rng, (config.vocab_size, config.width), std).astype(dtype))
    store.add("lm.pos", trunc_normal(rng, (config.max_seq_len, config.width), std).astype(dtype))
    for i in range(config.layers):
        init_encoder_block(store, f"lm.blocks.{i}", rng, config.width, config.mlp_ratio, dtype=dtype, std=std)
    init_layernorm(store, "lm.ln_f", config.width, dtype=dtype)


def lm_base_names(store):
    return store.names("lm.")


def attach_lora(store, config, spec, rng, std=0.02):
    """Freeze the decoder and add rank-``spec.rank`` adapters on each target.

    A is (r, d_in) ~ N(0, std), B is (d_out, r) zero, so the adapted model starts
    out identical to the base. Returns the number of scalars added.
    """
    if spec.rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {spec.rank}")
    for t in spec.targets:
        if t not in ("q_proj", "k_proj", "v_proj", "o_proj"):
            raise KeyError(f"unknown LoRA target {t!r}")
    store.freeze("lm.")
    added = 0
    dtype = store["lm.tok_emb"].dtype
    for i in range(config.layers):
        for t in spec.targets:
            d_in, d_out = store[f"lm.blocks.{i}.attn.{t}.w"].shape
            store.add(f"lora.{i}.{t}.A", trunc_normal(rng, (spec.rank, d_in), std).astype(dtype))
            store.add(f"lora.{i}.{t}.B", np.zeros((d_out, spec.rank), dtype=dtype))
            added += spec.rank * (d_in + d_out)
    return added


def lora_delta(store):
    """Scalar count of all adapter tensors present in ``store``."""
    return sum(store[n].data.size for n in store.names("lora."))


def _layer_lora(store, i, spec):
    if spec is None:
        return None
    out = {}
    for t in spec.targets:
        a = f"lora.{i}.{t}.A"
        if a in store:
            out[t] = (store[a], store[f"lora.{i}.{t}.B"], spec.scale)
    return out or None


def assemble_input(store, prefix, desc, question, answer, config, order=REGULAR, answer_marker=None):
    """Build the decoder input for a batch.

    ``prefix`` is a (B, L, e) tensor; ``desc``/``question``/``answer`` are lists
    of 1-D id arrays (question includes its marker, answer may be empty).
    Regular order: prefix, description, question, ``answer:``, answer.
    Alternative order: question, prefix, description, ``answer:``, answer.
    """
    if answer_marker is None:
        raise ValueError("answer_marker id is required")
    if order not in (REGULAR, ALTERNATIVE):
        raise ValueError(f"unknown prompt order {order!r}")
    b, n_pre, e = prefix.shape
    if e != config.width:
        raise ad.ShapeError(f"assemble_input: prefix width {e} != LM width {config.width}")
    if not (len(desc) == len(question) == len(answer) == b):
        raise ValueError("assemble_input: batch sizes of prefix and texts differ")
    marker = np.array([answer_marker], dtype=np.int64)
    pre = np.full(n_pre, -1, dtype=np.int64)
    rows, answer_starts = [], []
    for t, q, a in zip(desc, question, answer):
        parts = [pre, t, q] if order == REGULAR else [q, pre, t]
        head = np.concatenate(parts + [marker]).astype(np.int64)
        answer_starts.append(len(head))
        rows.append(np.concatenate([head, np.asarray(a, dtype=np.int64)]))
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    total = int(lengths.max())
    if total > config.max_seq_len:
        raise ValueError(f"assembled length {total} exceeds max sequence length {config.max_seq_len}")
    ids = np.full((b, total), PAD, dtype=np.int64)
    mask = np.zeros((b, total), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, answer_starts[i]: len(r)] = True

    is_prefix = ids == -1
    tok = ad.embedding(store["lm.tok_emb"], np.where(is_prefix, PAD, ids))
    keep = (~is_prefix).astype(prefix.dtype)[..., None]
    x = ad.mul(tok, keep)
    # one-hot placement of prefix rows; each sample may put them at a different offset
    place = np.zeros((b, total, n_pre), dtype=prefix.dtype)
    for i in range(b):
        where = np.flatnonzero(is_prefix[i])
        place[i, where, np.arange(len(where))] = 1.0
    x = ad.add(x, ad.matmul(ad.Tensor(place), prefix))
    return AssembledInput(embeds=x, ids=ids, answer_mask=mask, lengths=lengths)


def lm_forward(store, inp, config, lora=None):
    """Logits (B, T, V); position i sees rows <= i only."""
    x = inp.embeds if isinstance(inp, AssembledInput) else inp
    b, t, e = x.shape
    if e != config.width:
        raise ad.ShapeError(f"lm_forward: input width {e} != LM width {config.width}")
    if t > config.max_seq_len:
        raise ValueError(f"lm_forward: length {t} exceeds {config.max_seq_len}")
    x = ad.add(x, store["lm.pos"][:t])
    mask = causal_mask(t)
    for i in range(config.layers):
        x = encoder_block(store, f"lm.blocks.{i}", x, config.heads, mask=mask, lora=_layer_lora(store, i, lora))
    x = layernorm(store, "lm.ln_f", x)
    return ad.matmul(x, ad.transpose(store["lm.tok_emb"]))


def _shifted(inp):
    """Predictor rows/targets: token at i is predicted from position i - 1."""
    if not inp.answer_mask.any(axis=1).all():
        raise ValueError("every sample needs at least one answer position")
    if inp.answer_mask[:, 0].any():
        raise ValueError("answer cannot start at position 0")
    mask = inp.answer_mask[:, 1:]
    targets = np.where(mask, inp.ids[:, 1:], PAD)
    return mask, targets


def answer_logprob(store, inp, config, lora=None, logits=None):
    """Per-sample sum of log p(answer token | everything before it), shape (B,)."""
    mask, targets = _shifted(inp)
    if logits is None:
        logits = lm_forward(store, inp, config, lora)
    logp = ad.log_softmax(logits[:, :-1, :], axis=-1)
    picked = ad.slice_(logp, (np.arange(targets.shape[0])[:, None], np.arange(targets.shape[1])[None, :], targets))
    return ad.sum_(ad.mul(picked, mask.astype(picked.dtype)), axis=1)


def generation_loss(store, inp, config, lora=None, logits=None):
    """Answer cross-entropy: per-sample mean over answer tokens, then batch mean.

    For one sample this is exactly ``-answer_logprob / answer_length``.
    """
    mask, targets = _shifted(inp)
    if logits is None:
        logits = lm_forward(store, inp, config, lora)
    b = targets.shape[0]
    if b == 1:
        return ad.cross_entropy(logits[:, :-1, :], targets, mask)
    per_sample = answer_logprob(store, inp, config, logits=logits)
    weights = -1.0 / (mask.sum(axis=1) * b)
    return ad.sum_(ad.mul(per_sample, weights.astype(per_sample.dtype)))


def greedy_decode(store, inp, config, lora=None, max_new=8, logits_fn=None):
    """Append argmax tokens (lowest id wins ties) until EOS or ``max_new``.

    ``inp`` must hold prompts only (no answer rows). Returns one id array per
    sample, without the EOS.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if logits_fn is None:
        def logits_fn(x):
            return lm_forward(store, x, config, lora).data

    emb = store["lm.tok_emb"].data
    b, t, e = inp.embeds.shape
    lengths = inp.lengths.copy()
    buf = np.zeros((b, t + max_new, e), dtype=inp.embeds.dtype)
    buf[:, :t] = inp.embeds.data
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for step in range(max_new):
        cur = int(lengths.max())
        if cur > config.max_seq_len:
            break
        logits = logits_fn(ad.Tensor(buf[:, :cur]))
        last = logits[np.arange(b), lengths - 1]
        nxt = np.argmax(last, axis=-1)
        for i in range(b):
            if done[i]:
                continue
            tok = int(nxt[i])
            if tok == EOS:
                done[i] = True
                continue
            out[i].append(tok)
            if lengths[i] < buf.shape[1]:
                buf[i, lengths[i]] = emb[tok]
            lengths[i] += 1
        if done.all():
            break
    return [np.array(o, dtype=np.int64) for o in out]
