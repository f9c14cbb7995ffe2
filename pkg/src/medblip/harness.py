"""Training loop, zero-shot evaluation, generation, parameter accounting and gradient checks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, micro_config
from .data import ANSWERS, CLASSES, Vocabulary, detokenize, generate_sample, load_volume, read_manifest, tokenize
from .gradcheck import finite_difference_check
from .lm import LoraSpec, attach_lora, generation_loss, lm_forward
from .losses import clamp_temperature, itc_loss
from .model import (
    compute_losses,
    decode_batch,
    candidate_logprobs,
    enter_main_phase,
    group_of,
    image_queries,
    init_model,
    make_batch,
    prompt_input,
    warmup_loss,
)
from .optim import OptimState, optimizer_step
from .params import FreezeError, ParamStore, gradients, load_checkpoint, save_checkpoint, check_compatible
from .qformer import pad_batch, qformer_encode_image, text_encode, visual_prefix
from .vision import encode_image
from .volume import embed_from_store, patchify

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.mblp"
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    manifest_path: Path
    records: list
    patches: np.ndarray  # (n, N_v, p^3)

    def batch(self, idx, cfg, vocab):
        idx = np.asarray(idx)
        return make_batch([self.records[i] for i in idx], None, cfg, vocab, patches=self.patches[idx])


def load_dataset(path, cfg):
    manifest = read_manifest(path)
    if not manifest.records:
        raise ValueError(f"{path}: manifest has no records")
    if manifest.dim != cfg.volume_dim:
        raise ValueError(f"{path}: volume dim {manifest.dim} != configured {cfg.volume_dim}")
    patches = np.stack([patchify(load_volume(path, r), cfg.grid) for r in manifest.records]).astype(cfg.dtype)
    return Dataset(Path(path), manifest.records, patches)


# --------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """Append-only JSON-lines log; step indices must not decrease."""

    def __init__(self, path=None, append=False):
        self.path = Path(path) if path else None
        self.entries = []
        self._last_step = -1
        if self.path and append and self.path.is_file():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                entry = json.loads(line)
                self.entries.append(entry)
                self._last_step = max(self._last_step, entry.get("step", -1))
        elif self.path:
            self.path.write_text("", encoding="utf-8")

    def append(self, **entry):
        step = entry.get("step")
        if step is not None:
            if step < self._last_step:
                raise ValueError(f"metrics step {step} precedes {self._last_step}")
            self._last_step = step
        self.entries.append(entry)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def losses(self, phase="main", key="l_total"):
        return [e[key] for e in self.entries if e.get("phase") == phase and key in e]


# --------------------------------------------------------------------------
# training


def _freeze_violations(store, snapshot):
    return [n for n, arr in snapshot.items() if store.is_frozen(n) and not np.array_equal(store[n].data, arr)]


def _step(store, loss, state, step, where):
    try:
        grads = gradients(loss, store)
    except ad.NonFiniteError as exc:
        raise TrainingError(f"{where} step {step}: {exc}") from exc
    optimizer_step(store, grads, state)
    clamp_temperature(store)


def _optim(cfg):
    return OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)


def _batches(rng, n, batch_size):
    """Endless shuffled minibatches; every epoch is a fresh permutation."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def train(cfg, train_data=None, test_data=None, save=True, evaluate=True):
    """Run warm-up and main training for ``cfg``; returns (store, MetricsLog).

    With ``save`` the checkpoint, config and metrics go to ``cfg.out_dir``.
    """
    vocab = Vocabulary()
    if train_data is None and (cfg.steps > 0 or cfg.lm_warmup_steps > 0):
        train_data = load_dataset(cfg.train_manifest, cfg)
    if test_data is None and evaluate and cfg.test_manifest:
        test_data = load_dataset(cfg.test_manifest, cfg)
    out = Path(cfg.out_dir)
    if save:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / CONFIG_NAME)
    metrics = MetricsLog(out / METRICS_NAME if save else None)

    store = init_model(cfg, vocab)
    rng = np.random.default_rng([cfg.seed, 101])
    batch_size = min(cfg.batch_size, len(train_data.records)) if train_data else cfg.batch_size
    batches = _batches(rng, len(train_data.records), batch_size) if train_data else None

    if cfg.lm_warmup_steps > 0:
        # decoder-only phase: everything outside lm.* is held fixed
        held = [n for n in store.learnable_names() if not n.startswith("lm.")]
        for n in held:
            store.set_frozen(n, True)
        state = _optim(cfg)
        for step in range(cfg.lm_warmup_steps):
            batch = train_data.batch(next(batches), cfg, vocab)
            loss = warmup_loss(store, cfg, vocab, batch)
            metrics.append(phase="warmup", step=step, l_lg=float(loss.item()))
            _step(store, loss, state, step, "warmup")
        for n in held:
            store.set_frozen(n, False)

    enter_main_phase(store, cfg, len(vocab))
    initial = store.snapshot()
    state = _optim(cfg)
    for step in range(cfg.steps):
        batch = train_data.batch(next(batches), cfg, vocab)
        l_fa, l_lg, l_total = compute_losses(store, cfg, vocab, batch)
        if not np.isfinite(l_total.data).all():
            raise TrainingError(f"main step {step}: non-finite loss")
        metrics.append(phase="main", step=cfg.lm_warmup_steps + step, l_fa=float(l_fa.item()), l_lg=float(l_lg.item()),
                       l_total=float(l_total.item()))
        _step(store, l_total, state, step, "main")

    bad = _freeze_violations(store, initial)
    if bad:
        raise FreezeError(f"frozen parameters changed during training: {bad}")
    metrics.append(phase="summary", learnable_params=store.count(learnable_only=True),
                   total_params=store.count())
    if test_data is not None and evaluate:
        result = eval_zeroshot(store, cfg, test_data, method=cfg.eval_method)
        metrics.append(phase="eval", dataset=test_data.manifest_path.stem, method=cfg.eval_method,
                       accuracy=result.accuracy)
    if save:
        save_checkpoint(store, out / CHECKPOINT_NAME)
    return store, metrics


def load_run(ckpt_path):
    """Checkpoint plus the RunConfig saved beside it."""
    ckpt_path = Path(ckpt_path)
    cfg_path = ckpt_path.parent / CONFIG_NAME
    if not cfg_path.is_file():
        raise FileNotFoundError(f"no {CONFIG_NAME} next to checkpoint {ckpt_path}")
    cfg = RunConfig.load(cfg_path)
    vocab = Vocabulary()
    reference = init_model(cfg, vocab)
    enter_main_phase(reference, cfg, len(vocab))
    store = load_checkpoint(ckpt_path)
    check_compatible(store, reference)
    return store, cfg


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    method: str
    records: list = field(default_factory=list)
    note: str = ""


_INTERPRETATION = {
    "generate": "greedy decode, exact match against canonical answer strings (interpretation)",
    "rank": "argmax of candidate answer log-likelihood, lowest class index on ties (interpretation)",
}


def eval_zeroshot(store, cfg, data, method="generate", batch_size=50, per_token=None, decode_fn=None):
    """Classify every sample of ``data`` by generation or by answer ranking."""
    if not data.records:
        raise ValueError("eval_zeroshot: empty manifest")
    vocab = Vocabulary()
    per_token = cfg.rank_per_token if per_token is None else per_token
    canonical = {ANSWERS[c]: c for c in CLASSES}
    candidates = [tokenize(ANSWERS[c], vocab, eos=True) for c in CLASSES]
    rows, correct = [], 0
    for start in range(0, len(data.records), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data.records)))
        batch = data.batch(idx, cfg, vocab)
        if method == "generate":
            decoded = decode_fn(batch) if decode_fn else decode_batch(store, cfg, vocab, batch)
            texts = [detokenize(ids, vocab) for ids in decoded]
            preds = [canonical.get(t) for t in texts]
        elif method == "rank":
            scores = candidate_logprobs(store, cfg, vocab, batch, candidates)
            if per_token:
                scores = scores / np.array([len(c) for c in candidates])[None, :]
            preds = [CLASSES[int(np.argmax(s))] for s in scores]
            texts = [ANSWERS[p] for p in preds]
        else:
            raise ValueError(f"unknown eval method {method!r}")
        for i, text, pred in zip(idx, texts, preds):
            rec = data.records[i]
            ok = pred == rec.label
            correct += ok
            if pred is None:
                log.info("sample %s: non-canonical output %r counted wrong", rec.sample_id, text)
            rows.append({"sample_id": rec.sample_id, "label": rec.label, "output": text,
                         "prediction": pred, "correct": bool(ok)})
    return EvalResult(correct / len(data.records), method, rows, _INTERPRETATION[method])


def generate(store, cfg, data, sample_id, question):
    """Answer ``question`` about one sample by greedy decoding."""
    if not question or not question.strip():
        raise ValueError("question must not be empty")
    vocab = Vocabulary()
    q_ids = np.concatenate([[vocab.question_id], tokenize(question, vocab)]).astype(np.int64)
    idx = [i for i, r in enumerate(data.records) if r.sample_id == sample_id]
    if not idx:
        raise KeyError(f"sample {sample_id!r} not found")
    batch = data.batch(idx, cfg, vocab)
    batch.question = [q_ids]
    return detokenize(decode_batch(store, cfg, vocab, batch)[0], vocab)


# --------------------------------------------------------------------------
# parameter accounting


def count_params(store, cfg=None):
    by_module = {}
    for name, t in store.items():
        g = group_of(name)
        entry = by_module.setdefault(g, {"total": 0, "learnable": 0})
        entry["total"] += t.data.size
        if not store.is_frozen(name):
            entry["learnable"] += t.data.size
    return {
        "total": store.count(),
        "learnable": store.count(learnable_only=True),
        "lora_delta": sum(store[n].data.size for n in store.names("lora.")),
        "by_module": dict(sorted(by_module.items())),
    }


def lora_delta_closed_form(cfg):
    """Sum of r * (d_in + d_out) over adapted matrices (all square, width e)."""
    if cfg.mode != "lora":
        return 0
    return cfg.lm_layers * len(cfg.lora_targets) * cfg.lora_rank * (2 * cfg.lm_width)


# --------------------------------------------------------------------------
# gradient checks


@dataclass
class GradcheckReport:
    entries: list = field(default_factory=list)  # (check, parameter, group, error)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(e[3] < self.tolerance for e in self.entries)

    def failures(self):
        return [e for e in self.entries if e[3] >= self.tolerance]

    def by_group(self):
        out = {}
        for check, _, group, err in self.entries:
            key = f"{check}/{group}"
            out[key] = max(out.get(key, 0.0), err)
        return out

    def format(self):
        lines = []
        for key, err in sorted(self.by_group().items()):
            flag = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"{key:<40s} max_rel_err={err:.3e}  {flag}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _micro_batch(cfg, vocab):
    records, vols = [], []
    for k in range(cfg.batch_size):
        rec, vol = generate_sample(CLASSES[k % len(CLASSES)], 1000 + k, cfg.volume_dim)
        records.append(rec)
        vols.append(vol)
    return make_batch(records, vols, cfg, vocab)


def _unfrozen(store, prefixes):
    """Copy of the parameters under ``prefixes``, all learnable."""
    out = ParamStore(store.rng_seed)
    for n, t in store.items():
        if any(n.startswith(p) for p in prefixes):
            out.add(n, t.data, frozen=False)
    return out


def _readout(rng, shape):
    return ad.Tensor(rng.standard_normal(shape))


def _module_checks(cfg, vocab, h):
    """(check name, loss_fn, store) for each module in isolation, float64."""
    rng = np.random.default_rng(cfg.seed + 7)
    full = init_model(cfg, vocab)
    batch = _micro_batch(cfg, vocab)
    patches = ad.Tensor(batch.patches)
    checks = []

    s_embed = _unfrozen(full, ["embed."])
    r_embed = _readout(rng, (len(batch.desc), cfg.grid.num_patches + int(cfg.aggregate_token), cfg.vision_width))
    checks.append(("volume-embed", lambda s: ad.sum_(ad.mul(embed_from_store(s, patches), r_embed)), s_embed))

    # generic tokens: embed outputs are nearly collinear, which starves q/k of gradient
    tokens = ad.Tensor(rng.standard_normal(r_embed.shape))
    s_vis = _unfrozen(full, ["vision."])
    checks.append(("frozen-vision", lambda s: ad.sum_(ad.mul(encode_image(tokens, s, cfg.vision), r_embed)), s_vis))

    feats = ad.Tensor(rng.standard_normal((len(batch.desc), 5, cfg.vision_width)))
    s_q = _unfrozen(full, ["qformer."])
    r_q = _readout(rng, (len(batch.desc), cfg.num_queries, cfg.query_width))
    checks.append(("medqformer-image", lambda s: ad.sum_(ad.mul(qformer_encode_image(s, feats, cfg.qformer), r_q)), s_q))

    ids, lengths = pad_batch(batch.qa)
    s_t = _unfrozen(full, ["text."])
    r_seq = _readout(rng, ids.shape + (cfg.query_width,))

    def text_loss(s):
        seq, pooled = text_encode(s, ids, cfg.qformer, lengths)
        valid = (np.arange(ids.shape[1])[None, :] < lengths[:, None])[..., None]
        return ad.add(ad.sum_(ad.mul(seq, ad.mul(r_seq, valid.astype(np.float64)))), ad.sum_(pooled))

    checks.append(("medqformer-text", text_loss, s_t))

    qry = ad.Tensor(rng.standard_normal((len(batch.desc), cfg.num_queries, cfg.query_width)))
    s_p = _unfrozen(full, ["prefix."])
    r_p = _readout(rng, (len(batch.desc), cfg.num_queries, cfg.lm_width))
    checks.append(("medqformer-prefix", lambda s: ad.sum_(ad.mul(visual_prefix(s, qry), r_p)), s_p))

    # decoder with randomised adapters; base weights left learnable to check them too
    s_lm = _unfrozen(full, ["lm."])
    lm_cfg = cfg.lm(len(vocab))
    spec = LoraSpec(2, 4.0, ("q_proj", "v_proj"))
    attach_lora(s_lm, lm_cfg, spec, rng, std=0.5)
    for n in s_lm.names("lm."):
        s_lm.set_frozen(n, False)
    for n in s_lm.names("lora."):
        if n.endswith(".B"):
            s_lm.assign(n, rng.standard_normal(s_lm[n].shape) * 0.5)
    prefix_in = ad.Tensor(rng.standard_normal((len(batch.desc), cfg.num_queries, cfg.lm_width)))

    def lm_loss(s):
        inp = prompt_input(s, cfg, vocab, prefix_in, batch)
        return generation_loss(s, inp, lm_cfg, lora=spec)

    checks.append(("lm-decoder", lm_loss, s_lm))

    s_loss = ParamStore()
    s_loss.add("itc.queries", rng.standard_normal((3, cfg.num_queries, cfg.query_width)))
    s_loss.add("itc.texts", rng.standard_normal((3, cfg.query_width)))
    s_loss.add("loss.log_tau", np.array([np.log(0.5)]))
    checks.append(("losses-objectives", lambda s: itc_loss(s["itc.queries"], s["itc.texts"], s["loss.log_tau"]), s_loss))

    # full objective, lora mode, adapters randomised so their gradients are non-trivial
    s_full = init_model(cfg, vocab)
    enter_main_phase(s_full, cfg, len(vocab))
    for n in s_full.names("lora."):
        s_full.assign(n, rng.standard_normal(s_full[n].shape) * 0.5)
    checks.append(("L_total", lambda s: compute_losses(s, cfg, vocab, batch)[2], s_full))
    return checks


def gradcheck(cfg=None, h=1e-5, tolerance=1e-4, only=None):
    """Finite-difference check of every module and of the full objective."""
    cfg = cfg or micro_config()
    if cfg.dtype != "float64":
        raise ValueError("gradcheck needs dtype float64")
    vocab = Vocabulary()
    report = GradcheckReport(tolerance=tolerance)
    for name, loss_fn, store in _module_checks(cfg, vocab, h):
        if only and name not in only:
            continue
        _, per = finite_difference_check(loss_fn, store, h=h, per_param=True)
        for pname, err in sorted(per.items()):
            report.entries.append((name, pname, group_of(pname) if group_of(pname) != "other" else name, err))
    return report
