"""Contrastive feature alignment, language generation loss and their weighted sum."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .lm import generation_loss

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 1.0


def pair_similarity(queries, text):
    """Max over query rows of the cosine with ``text``; (L, d), (d,) -> scalar."""
    if queries.shape[-1] != text.shape[-1]:
        raise ad.ShapeError(f"pair_similarity: widths {queries.shape[-1]} and {text.shape[-1]} differ")
    cos = ad.cosine_similarity(queries, ad.reshape(text, (1, text.shape[-1])), axis=-1)
    best, _ = ad.max_(cos, axis=-1)
    return best


def similarity_matrix(queries, texts):
    """(B, L, d) query outputs x (B, d) pooled texts -> (B, B) max-over-query cosines."""
    b, n_q, d = queries.shape
    if texts.shape != (texts.shape[0], d):
        raise ad.ShapeError(f"similarity_matrix: text shape {texts.shape} vs query width {d}")
    cos = ad.cosine_similarity(
        ad.reshape(queries, (b, 1, n_q, d)),
        ad.reshape(texts, (1, texts.shape[0], 1, d)),
        axis=-1,
    )
    best, _ = ad.max_(cos, axis=-1)
    return best


def _inv_temperature(log_tau, dtype):
    if isinstance(log_tau, ad.Tensor):
        return ad.exp(ad.scale(ad.reshape(log_tau, ()), -1.0))
    return ad.Tensor(np.asarray(1.0 / math.exp(log_tau), dtype=dtype))


def itc_from_logits(logits):
    """Symmetric cross-entropy of a (B, B) logit matrix with the diagonal as targets."""
    b = logits.shape[0]
    if logits.shape != (b, b):
        raise ad.ShapeError(f"itc: logits must be square, got {logits.shape}")
    target = np.arange(b)
    rows = ad.cross_entropy(logits, target)
    cols = ad.cross_entropy(ad.transpose(logits), target)
    return ad.scale(ad.add(rows, cols), 0.5)


def itc_loss(queries, texts, log_tau):
    """Image-text contrastive loss with in-batch negatives; sample i pairs with text i."""
    if queries.shape[0] != texts.shape[0]:
        raise ValueError(f"itc_loss: {queries.shape[0]} images but {texts.shape[0]} texts")
    if queries.shape[0] < 1:
        raise ValueError("itc_loss: empty batch")
    sim = similarity_matrix(queries, texts)
    return itc_from_logits(ad.mul(sim, _inv_temperature(log_tau, sim.dtype)))


def feature_alignment_loss(queries, desc_pooled, qa_pooled, log_tau, use_qa=True):
    """itc(images, descriptions) + itc(images, question+answer texts)."""
    if desc_pooled.shape[0] != queries.shape[0] or (use_qa and qa_pooled.shape[0] != queries.shape[0]):
        raise ValueError("feature_alignment_loss: batch sizes differ")
    loss = itc_loss(queries, desc_pooled, log_tau)
    if use_qa:
        loss = ad.add(loss, itc_loss(queries, qa_pooled, log_tau))
    return loss


def total_loss(l_fa, l_lg, lambda_lg=1.0):
    if not (np.isfinite(l_fa.data).all() and np.isfinite(l_lg.data).all()):
        raise ad.NonFiniteError("total_loss: non-finite input")
    return ad.add(l_fa, ad.scale(l_lg, lambda_lg))


def language_generation_loss(store, inp, config, lora=None, logits=None):
    return generation_loss(store, inp, config, lora=lora, logits=logits)


def clamp_temperature(store, name="loss.log_tau"):
    if name in store:
        t = store[name]
        t.data = np.clip(t.data, math.log(TAU_MIN), math.log(TAU_MAX)).astype(t.dtype)
