"""End-to-end acceptance suite; one PASS/FAIL line per criterion is printed in the summary.

The training criteria (6-9) share runs through a session cache, so the whole
module takes roughly 15 minutes on one core.
"""

import filecmp
import math
import shutil
import time
import tracemalloc

import numpy as np
import pytest

from medblip import autodiff as ad
from medblip.config import RunConfig
from medblip.data import Vocabulary, generate_dataset
from medblip.harness import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    count_params,
    gradcheck,
    lora_delta_closed_form,
    train,
)
from medblip.lm import LoraSpec, answer_logprob, assemble_input, attach_lora, generation_loss, init_lm, lm_forward
from medblip.losses import feature_alignment_loss, itc_from_logits, itc_loss
from medblip.model import enter_main_phase, init_model
from medblip.params import ParamStore
from medblip.vision import encode_image, init_frozen
from medblip.volume import PatchGrid, embed_from_store, init_embed, patchify, prepare_volume

RESULTS = {}


def report(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# --------------------------------------------------------------------------
# shared data and runs


@pytest.fixture(scope="session")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    for name, amb in (("toy", False), ("amb", True)):
        generate_dataset(root, f"{name}_train", 200, 32, seed=0, ambiguous=amb)
        generate_dataset(root, f"{name}_test", 50, 32, seed=1, ambiguous=amb)
    return root


class Runs:
    def __init__(self, data_root, out_root):
        self.data_root, self.out_root, self.cache = data_root, out_root, {}

    def cfg(self, kind="toy", **kw):
        tag = "_".join(f"{k}-{v}" for k, v in sorted(kw.items())) or "default"
        return RunConfig(train_manifest=str(self.data_root / f"{kind}_train.tsv"),
                         test_manifest=str(self.data_root / f"{kind}_test.tsv"),
                         out_dir=str(self.out_root / f"{kind}_{tag}"), **kw)

    def get(self, kind="toy", **kw):
        cfg = self.cfg(kind, **kw)
        if cfg.out_dir not in self.cache:
            t0 = time.process_time()
            _, metrics = train(cfg)
            cpu = time.process_time() - t0
            acc = [e["accuracy"] for e in metrics.entries if e.get("phase") == "eval"][0]
            self.cache[cfg.out_dir] = (cfg, metrics, acc, cpu)
        return self.cache[cfg.out_dir]


@pytest.fixture(scope="session")
def runs(datasets, tmp_path_factory):
    return Runs(datasets, tmp_path_factory.mktemp("acceptance_runs"))


# --------------------------------------------------------------------------
# 1. geometry


def test_criterion_1_geometry():
    t0 = time.perf_counter()
    tracemalloc.start()
    cfg = RunConfig(volume_dim=224, patch_size=32, vision_width=1408, vision_layers=1, vision_heads=16,
                    aggregate_token=True)
    grid = PatchGrid(32, 32, 224)  # stride 32
    raw = np.random.default_rng(0).random((124, 256, 256), dtype=np.float32)
    patches = patchify(prepare_volume(raw, 224), grid)
    store = init_frozen(cfg.vision)
    init_embed(store, np.random.default_rng(1), grid, 1408, aggregate=True)
    tokens = embed_from_store(store, patches)
    feats = encode_image(tokens, store, cfg.vision)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    dt = time.perf_counter() - t0
    ok = tokens.shape == (344, 1408) and feats.shape == (344, 1408) and dt < 30 and peak < 2 ** 31
    report(1, ok, f"tokens {tokens.shape}, features {feats.shape}, {dt:.1f}s, peak {peak / 2 ** 20:.0f} MiB")


# --------------------------------------------------------------------------
# 2. gradients


def test_criterion_2_gradcheck():
    t0 = time.perf_counter()
    rep = gradcheck()
    dt = time.perf_counter() - t0
    worst = max(rep.by_group().items(), key=lambda kv: kv[1])
    report(2, rep.passed and dt < 120, f"{len(rep.by_group())} groups, worst {worst[0]} {worst[1]:.2e}, {dt:.0f}s")


# --------------------------------------------------------------------------
# 3. freeze contracts


def _short_run(datasets, tmp_path, mode):
    cfg = RunConfig(mode=mode, steps=20, lm_warmup_steps=0, train_manifest=str(datasets / "toy_train.tsv"),
                    out_dir=str(tmp_path / mode))
    vocab = Vocabulary()
    init = init_model(cfg, vocab)
    enter_main_phase(init, cfg, len(vocab))
    store, _ = train(cfg, evaluate=False, save=False)
    same = lambda n: np.array_equal(store[n].data, init[n].data)  # noqa: E731
    return store, same


def test_criterion_3_freeze(datasets, tmp_path):
    t0 = time.perf_counter()
    store, same = _short_run(datasets, tmp_path, "frozen")
    frozen_ok = all(same(n) for n in store.names("vision.") + store.names("lm."))
    store, same = _short_run(datasets, tmp_path, "lora")
    base_ok = all(same(n) for n in store.names("vision.") + store.names("lm."))
    qv_base = [n for n in store.names("lm.") if ".q_proj." in n or ".v_proj." in n]
    moved = store.names("lora.") + store.names("qformer.") + store.names("text.") + store.names("embed.") \
        + store.names("prefix.")
    changed = [n for n in moved if not same(n)]
    dt = time.perf_counter() - t0
    ok = frozen_ok and base_ok and qv_base and len(changed) == len(moved) and dt < 60
    report(3, ok, f"frozen-mode base identical={frozen_ok}; lora-mode base identical={base_ok} "
                  f"({len(qv_base)} q/v tensors); {len(changed)}/{len(moved)} trainable tensors changed; {dt:.0f}s")


# --------------------------------------------------------------------------
# 4. LoRA identity


def test_criterion_4_lora_identity():
    vocab = Vocabulary()
    lm_cfg = RunConfig().lm(len(vocab))
    identical = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_lm(store, rng, lm_cfg)
        prefix = ad.Tensor(rng.standard_normal((2, 8, lm_cfg.width)).astype(np.float32))
        ids = lambda n: rng.integers(5, len(vocab), size=n)  # noqa: E731
        inp = assemble_input(store, prefix, [ids(10), ids(6)], [ids(8), ids(8)], [ids(2), ids(3)], lm_cfg,
                             answer_marker=vocab.answer_id)
        before = lm_forward(store, inp, lm_cfg).data.copy()
        spec = LoraSpec()
        attach_lora(store, lm_cfg, spec, rng)
        after = lm_forward(store, inp, lm_cfg, lora=spec).data
        identical += np.array_equal(before, after)
    report(4, identical == 10, f"{identical}/10 inputs bit-identical after attaching B=0 adapters")


# --------------------------------------------------------------------------
# 5. loss oracles


def test_criterion_5_loss_oracles():
    rng = np.random.default_rng(5)
    T = ad.Tensor
    b1 = itc_loss(T(rng.standard_normal((1, 8, 16))), T(rng.standard_normal((1, 16))), math.log(0.07)).item()
    hand = math.log1p(math.exp(-1.0))
    two = itc_from_logits(T(np.eye(2))).item()
    two_cos = itc_loss(T([[[1.0, 0.0]], [[0.0, 1.0]]]), T([[1.0, 0.0], [0.0, 1.0]]), 0.0).item()

    q, d, qa = (T(rng.standard_normal(s)) for s in ((6, 8, 16), (6, 16), (6, 16)))
    fa = feature_alignment_loss(q, d, qa, math.log(0.07)).item()
    parts = itc_loss(q, d, math.log(0.07)).item() + itc_loss(q, qa, math.log(0.07)).item()

    vocab = Vocabulary()
    cfg = RunConfig(dtype="float64", init_std=0.3)
    store = ParamStore()
    lm_cfg = cfg.lm(len(vocab))
    init_lm(store, rng, lm_cfg, dtype=np.float64, std=0.3)
    ids = lambda n: rng.integers(5, len(vocab), size=n)  # noqa: E731
    inp = assemble_input(store, T(rng.standard_normal((1, 8, 64))), [ids(12)], [ids(8)], [ids(4)], lm_cfg,
                         answer_marker=vocab.answer_id)
    lg = generation_loss(store, inp, lm_cfg).item()
    lp = answer_logprob(store, inp, lm_cfg).data[0]

    checks = {
        "itc(B=1)==0": b1 == 0.0,
        "2x2": abs(two - hand) < 1e-6 and abs(two_cos - hand) < 1e-6,
        "FA=sum": abs(fa - parts) < 1e-7,
        "LG=-logp/len": bool(abs(lg - (-lp / 4)) < 1e-7),
    }
    report(5, all(checks.values()), f"{checks}; 2x2 {two:.8f} vs {hand:.8f}; FA {fa:.8f} vs {parts:.8f}")


# --------------------------------------------------------------------------
# 6. learnability (also the training-progress oracle)


def test_criterion_6_learnability(runs):
    got = [runs.get(seed=s) for s in range(3)]
    accs = [g[2] for g in got]
    cpu = [g[3] for g in got]
    med = float(np.median(accs))
    report(6, med >= 0.90 and max(cpu) <= 600,
           f"generate accuracy per seed {accs}, median {med:.3f}; cpu {max(cpu):.0f}s max per run")


def test_training_progress_oracle(runs):
    curves = [runs.get(seed=s)[1].losses() for s in range(3)]
    at0 = np.median([c[0] for c in curves])
    at200 = np.median([c[200] for c in curves])
    assert at200 < at0, (at0, at200)


# --------------------------------------------------------------------------
# 7. ablation direction


def test_criterion_7_ablation(runs):
    both = [runs.get("amb", seed=s)[2] for s in range(3)]
    single = [runs.get("amb", seed=s, use_qa_itc=False)[2] for s in range(3)]
    mb, ms = float(np.median(both)), float(np.median(single))
    report(7, mb >= ms, f"ambiguous text: both ITC terms {both} (median {mb:.3f}) vs (I,T) only {single} "
                        f"(median {ms:.3f})")


# --------------------------------------------------------------------------
# 8. prompt order


def test_criterion_8_prompt_order(runs):
    reg = runs.get(seed=0)[2]
    alt = runs.get(seed=0, order="alternative")[2]
    report(8, reg >= 0.80 and alt >= 0.80, f"regular {reg:.3f}, alternative {alt:.3f}")


# --------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(runs, tmp_path):
    cfg = runs.get(seed=0)[0]
    out = cfg.out_dir
    first = tmp_path / "first"
    shutil.copytree(out, first)
    train(cfg)
    same_m = filecmp.cmp(first / METRICS_NAME, f"{out}/{METRICS_NAME}", shallow=False)
    same_c = filecmp.cmp(first / CHECKPOINT_NAME, f"{out}/{CHECKPOINT_NAME}", shallow=False)
    report(9, same_m and same_c, f"metrics byte-identical={same_m}, checkpoint byte-identical={same_c}")


# --------------------------------------------------------------------------
# 10. parameter accounting


def test_criterion_10_param_accounting():
    rows = []
    ok = True
    for dims in ({}, {"lm_width": 32, "lm_layers": 3, "lora_rank": 2}, {"lora_targets": ["q_proj"]}):
        reps = {}
        for mode in ("frozen", "lora"):
            cfg = RunConfig(mode=mode, **dims)
            store = init_model(cfg)
            enter_main_phase(store, cfg, store["lm.tok_emb"].shape[0])
            reps[mode] = count_params(store, cfg)
            # independent count: r * (d_in + d_out) read off the adapted weight shapes
            expect = 0
            if mode == "lora":
                for i in range(cfg.lm_layers):
                    for t in cfg.lora_targets:
                        d_in, d_out = store[f"lm.blocks.{i}.attn.{t}.w"].shape
                        expect += cfg.lora_rank * (d_in + d_out)
            ok &= reps[mode]["lora_delta"] == expect == lora_delta_closed_form(cfg)
        ok &= reps["lora"]["learnable"] > reps["frozen"]["learnable"]
        rows.append(f"delta {reps['lora']['lora_delta']}, learnable {reps['frozen']['learnable']}"
                    f"->{reps['lora']['learnable']}")
    report(10, ok, "; ".join(rows))
