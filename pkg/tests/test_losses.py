import math

import numpy as np
import pytest

from medblip import autodiff as ad
from medblip.config import micro_config
from medblip.data import Vocabulary
from medblip.harness import _micro_batch
from medblip.losses import (
    clamp_temperature,
    feature_alignment_loss,
    itc_from_logits,
    itc_loss,
    pair_similarity,
    similarity_matrix,
    total_loss,
)
from medblip.model import compute_losses, enter_main_phase, init_model
from medblip.params import ParamStore, gradients


def T(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64))


def test_pair_similarity_examples():
    t = np.array([0.3, -1.2, 2.0])
    assert pair_similarity(T([t]), T(t)).item() == pytest.approx(1.0, abs=1e-15)
    assert pair_similarity(T([t, -t]), T(t)).item() == pytest.approx(1.0, abs=1e-15)
    assert pair_similarity(T([[1, 0], [0, 1]]), T([0.6, 0.8])).item() == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ValueError, match="zero-norm"):
        pair_similarity(T([[0, 0]]), T([1, 0]))


def test_similarity_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    q, t = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 5))
    s = similarity_matrix(T(q), T(t)).data
    for i in range(3):
        for j in range(3):
            assert s[i, j] == pytest.approx(pair_similarity(T(q[i]), T(t[j])).item(), abs=1e-14)


def test_itc_single_pair_is_exactly_zero():
    rng = np.random.default_rng(1)
    assert itc_loss(T(rng.standard_normal((1, 4, 3))), T(rng.standard_normal((1, 3))), math.log(0.07)).item() == 0.0


def test_itc_two_by_two_hand_case():
    expected = math.log(1 + math.exp(-1))
    assert expected == pytest.approx(0.31326, abs=1e-5)
    assert abs(itc_from_logits(T(np.eye(2))).item() - expected) < 1e-6
    # the same through cosines: one query per image, orthogonal texts, tau = 1
    loss = itc_loss(T([[[1, 0]], [[0, 1]]]), T([[1, 0], [0, 1]]), 0.0)
    assert abs(loss.item() - expected) < 1e-6


def test_itc_joint_permutation_invariance():
    rng = np.random.default_rng(2)
    q, t = rng.standard_normal((6, 3, 4)), rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    a = itc_loss(T(q), T(t), math.log(0.1)).item()
    b = itc_loss(T(q[perm]), T(t[perm]), math.log(0.1)).item()
    assert abs(a - b) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_itc_nonnegative_and_monotone_in_diagonal(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((5, 5))
    losses = [itc_from_logits(T(s + c * np.eye(5))).item() for c in (0, 1, 3, 10, 30)]
    assert all(x >= 0 for x in losses)
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-10


def test_batch_mismatch():
    with pytest.raises(ValueError):
        itc_loss(T(np.ones((2, 1, 3))), T(np.ones((3, 3))), 0.0)
    with pytest.raises(ValueError):
        feature_alignment_loss(T(np.ones((2, 1, 3))), T(np.ones((2, 3))), T(np.ones((1, 3))), 0.0)


def test_feature_alignment_is_sum_of_terms():
    rng = np.random.default_rng(3)
    q, d, qa = rng.standard_normal((4, 3, 5)), rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    lt = math.log(0.07)
    both = feature_alignment_loss(T(q), T(d), T(qa), lt).item()
    sep = itc_loss(T(q), T(d), lt).item() + itc_loss(T(q), T(qa), lt).item()
    assert abs(both - sep) < 1e-7
    only = feature_alignment_loss(T(q), T(d), None, lt, use_qa=False).item()
    assert only == itc_loss(T(q), T(d), lt).item()
    assert feature_alignment_loss(T(q[:1]), T(d[:1]), T(qa[:1]), lt).item() == 0.0


def test_total_loss_arithmetic():
    assert total_loss(T(0.5), T(2.0), 1.0).item() == 2.5
    assert total_loss(T(0.5), T(2.0), 0.0).item() == 0.5


def test_temperature_clamp():
    s = ParamStore()
    s.add("loss.log_tau", np.array([math.log(5.0)]))
    clamp_temperature(s)
    assert s["loss.log_tau"].data[0] == pytest.approx(0.0)
    s.assign("loss.log_tau", np.array([math.log(1e-4)]))
    clamp_temperature(s)
    assert math.exp(s["loss.log_tau"].data[0]) == pytest.approx(0.01)


def test_learnable_temperature_gets_gradient():
    s = ParamStore()
    s.add("loss.log_tau", np.array([math.log(0.07)]))
    rng = np.random.default_rng(4)
    loss = itc_loss(T(rng.standard_normal((3, 2, 4))), T(rng.standard_normal((3, 4))), s["loss.log_tau"])
    assert gradients(loss, s)["loss.log_tau"][0] != 0


def test_total_gradient_splits_additively():
    cfg = micro_config(lambda_lg=0.7)
    vocab = Vocabulary()
    store = init_model(cfg, vocab)
    enter_main_phase(store, cfg, len(vocab))
    batch = _micro_batch(cfg, vocab)
    l_fa, l_lg, l_total = compute_losses(store, cfg, vocab, batch)
    g_fa = gradients(l_fa, store)
    g_lg = gradients(compute_losses(store, cfg, vocab, batch)[1], store)
    g_tot = gradients(compute_losses(store, cfg, vocab, batch)[2], store)
    for n in g_tot:
        np.testing.assert_allclose(g_tot[n], g_fa[n] + 0.7 * g_lg[n], rtol=1e-9, atol=1e-12)
    # and numerically: directional finite difference of L_total along a random direction
    rng = np.random.default_rng(0)
    direction = {n: rng.standard_normal(store[n].shape) for n in g_tot}
    analytic = sum(float((g_tot[n] * direction[n]).sum()) for n in g_tot)
    h = 1e-6
    vals = []
    for sign in (1, -1):
        s2 = store.copy()
        for n in direction:
            s2.assign(n, store[n].data + sign * h * direction[n])
        vals.append(compute_losses(s2, cfg, vocab, batch)[2].item())
    numeric = (vals[0] - vals[1]) / (2 * h)
    assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-4
