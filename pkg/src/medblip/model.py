"""Wiring of the full model: volume tokens -> frozen encoder -> query bridge -> decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Vocabulary, build_texts, qa_text, tokenize
from .lm import assemble_input, attach_lora, init_lm, lm_forward, generation_loss, greedy_decode, answer_logprob
from .losses import feature_alignment_loss, total_loss
from .params import ParamStore
from .qformer import init_qformer, pad_batch, qformer_encode_image, text_encode, visual_prefix
from .vision import encode_image, init_frozen
from .volume import embed_from_store, init_embed, patchify

# top-level parameter groups, keyed by name prefix
GROUPS = {
    "embed.": "volume-embed",
    "vision.": "frozen-vision",
    "qformer.": "medqformer",
    "text.": "medqformer",
    "prefix.": "medqformer",
    "lm.": "lm-decoder",
    "lora.": "lm-decoder",
    "loss.": "losses-objectives",
}


def group_of(name):
    for prefix, group in GROUPS.items():
        if name.startswith(prefix):
            return group
    return "other"


def init_model(cfg, vocab=None):
    """All parameters for ``cfg``; vision frozen, decoder frozen + adapters in lora mode.

    In frozen mode the decoder is left trainable here so a warm-up phase can
    train it; ``freeze_lm`` is applied once that phase is over.
    """
    vocab = vocab or Vocabulary()
    dtype = np.dtype(cfg.dtype)
    store = ParamStore(cfg.seed)
    init_frozen(cfg.vision, store, dtype=dtype)
    rng = np.random.default_rng([cfg.seed, 17])
    init_embed(store, rng, cfg.grid, cfg.vision_width, aggregate=cfg.aggregate_token, dtype=dtype, std=cfg.init_std)
    init_qformer(store, rng, cfg.qformer, cfg.vision_width, len(vocab), cfg.lm_width, dtype=dtype, std=cfg.init_std)
    init_lm(store, rng, cfg.lm(len(vocab)), dtype=dtype, std=cfg.init_std)
    store.add("loss.log_tau", np.array([math.log(cfg.tau_init)], dtype=dtype))
    return store


def enter_main_phase(store, cfg, vocab_size):
    """Freeze the decoder base; attach adapters in lora mode. Returns adapter scalars added."""
    if cfg.mode == "lora":
        rng = np.random.default_rng([cfg.seed, 29])
        return attach_lora(store, cfg.lm(vocab_size), cfg.lora, rng)
    store.freeze("lm.")
    return 0


@dataclass
class Batch:
    patches: np.ndarray  # (B, N_v, p^3)
    desc: list
    question: list
    answer: list
    qa: list
    labels: list


def encode_record_texts(record, vocab):
    t, q, a = build_texts(record, vocab)
    qa = tokenize(qa_text(record), vocab, bos=True)
    return t, q, a, qa


def make_batch(records, volumes, cfg, vocab, patches=None):
    if patches is None:
        patches = np.stack([patchify(v, cfg.grid) for v in volumes])
    texts = [encode_record_texts(r, vocab) for r in records]
    return Batch(
        patches=np.asarray(patches, dtype=cfg.dtype),
        desc=[x[0] for x in texts],
        question=[x[1] for x in texts],
        answer=[x[2] for x in texts],
        qa=[x[3] for x in texts],
        labels=[r.label for r in records],
    )


def image_queries(store, cfg, patches):
    # centred voxels: layer norms downstream discard a patch's overall scale,
    # so without the shift a uniformly dark patch looks like a bright one
    tokens = embed_from_store(store, ad.Tensor(patches - np.asarray(cfg.intensity_center, dtype=patches.dtype)))
    feats = encode_image(tokens, store, cfg.vision)
    return qformer_encode_image(store, feats, cfg.qformer)


def pooled_text(store, cfg, seqs):
    ids, lengths = pad_batch(seqs)
    return text_encode(store, ids, cfg.qformer, lengths)[1]


def prompt_input(store, cfg, vocab, prefix, batch, with_answer=True):
    answers = batch.answer if with_answer else [np.zeros(0, dtype=np.int64)] * len(batch.desc)
    return assemble_input(store, prefix, batch.desc, batch.question, answers, cfg.lm(len(vocab)),
                          order=cfg.order, answer_marker=vocab.answer_id)


def compute_losses(store, cfg, vocab, batch):
    """(L_FA, L_LG, L_total) tensors for one batch."""
    queries = image_queries(store, cfg, batch.patches)
    desc_pool = pooled_text(store, cfg, batch.desc)
    qa_pool = pooled_text(store, cfg, batch.qa) if cfg.use_qa_itc else None
    l_fa = feature_alignment_loss(queries, desc_pool, qa_pool, store["loss.log_tau"], use_qa=cfg.use_qa_itc)
    inp = prompt_input(store, cfg, vocab, visual_prefix(store, queries), batch)
    l_lg = generation_loss(store, inp, cfg.lm(len(vocab)), lora=cfg.lora)
    return l_fa, l_lg, total_loss(l_fa, l_lg, cfg.lambda_lg)


def warmup_loss(store, cfg, vocab, batch):
    """Text-only decoder loss with an all-zero prefix in place of the image rows."""
    b = len(batch.desc)
    prefix = ad.Tensor(np.zeros((b, cfg.num_queries, cfg.lm_width), dtype=cfg.dtype))
    inp = prompt_input(store, cfg, vocab, prefix, batch)
    return generation_loss(store, inp, cfg.lm(len(vocab)))


def decode_batch(store, cfg, vocab, batch, max_new=None):
    queries = image_queries(store, cfg, batch.patches)
    inp = prompt_input(store, cfg, vocab, visual_prefix(store, queries), batch, with_answer=False)
    return greedy_decode(store, inp, cfg.lm(len(vocab)), lora=cfg.lora, max_new=max_new or cfg.max_new_tokens)


def candidate_logprobs(store, cfg, vocab, batch, candidates):
    """(B, C) answer log-probabilities of each candidate id sequence."""
    queries = image_queries(store, cfg, batch.patches)
    prefix = visual_prefix(store, queries)
    out = []
    for cand in candidates:
        answers = [cand] * len(batch.desc)
        inp = assemble_input(store, prefix, batch.desc, batch.question, answers, cfg.lm(len(vocab)),
                             order=cfg.order, answer_marker=vocab.answer_id)
        out.append(answer_logprob(store, inp, cfg.lm(len(vocab)), lora=cfg.lora).data)
    return np.stack(out, axis=1)


def logits_for(store, cfg, vocab, batch):
    queries = image_queries(store, cfg, batch.patches)
    inp = prompt_input(store, cfg, vocab, visual_prefix(store, queries), batch)
    return lm_forward(store, inp, cfg.lm(len(vocab)), lora=cfg.lora)
