"""Closed-grammar tokenizer, prompt texts and the synthetic EHR generator.

Samples are class-conditioned: a smooth random brain-like background with a
dark central ellipsoid whose radius grows with severity, and a short clinical
description whose scores are drawn from class-dependent ranges.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import read_volume, write_volume

PAD, BOS, EOS = 0, 1, 2
QUESTION_MARKER = "question:"
ANSWER_MARKER = "answer:"

CLASSES = ("NC", "MCI", "DEM")
ANSWERS = {"NC": "non demented", "MCI": "mild cognitive impairment", "DEM": "dementia"}
QUESTION = "what will this subject be diagnosed with ?"
RADIUS_FACTOR = {"NC": 1.0, "MCI": 1.5, "DEM": 2.2}

# generator parameters, not clinical claims
MMSE_RANGE = {"NC": (28, 30), "MCI": (24, 27), "DEM": (12, 23)}
CDR_VALUES = {"NC": ("0",), "MCI": ("0.5",), "DEM": ("1", "2")}
AGE_RANGE = (55, 90)
EDU_RANGE = (8, 20)

_TEMPLATE_WORDS = ["age", "sex", "female", "male", "education", "years", "mmse", "cdr", ",", "."]
_SPECIALS = ["<pad>", "<bos>", "<eos>", QUESTION_MARKER, ANSWER_MARKER]


class TokenizeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class Vocabulary:
    """Bijective word <-> id table built from the generator's grammar."""

    def __init__(self, words=None):
        if words is None:
            words = _grammar_words()
        self.itos = list(_SPECIALS) + [w for w in words if w not in _SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.itos)

    @property
    def question_id(self):
        return self.stoi[QUESTION_MARKER]

    @property
    def answer_id(self):
        return self.stoi[ANSWER_MARKER]


def _grammar_words():
    words = list(_TEMPLATE_WORDS)
    words += QUESTION.split()
    for cls in CLASSES:
        words += ANSWERS[cls].split()
    words += [str(i) for i in range(0, 101)]
    words += ["0.5"]
    seen, out = set(), []
    for w in words:
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


_SPLIT = re.compile(r"[^\s?,]+|[?,]")


def tokenize(text, vocab, bos=False, eos=False):
    """Lowercased word-level ids; ``?`` and ``,`` are split off as words."""
    words = _SPLIT.findall(text.lower())
    unknown = [w for w in words if w not in vocab.stoi]
    if unknown:
        raise TokenizeError(f"out-of-grammar word(s): {unknown}")
    ids = [vocab.stoi[w] for w in words]
    if bos:
        ids = [BOS] + ids
    if eos:
        ids = ids + [EOS]
    return np.array(ids, dtype=np.int64)


def detokenize(ids, vocab):
    """Inverse of ``tokenize`` for in-grammar text; PAD/BOS/EOS are dropped."""
    out = []
    for i in np.asarray(ids).tolist():
        if i in (PAD, BOS, EOS):
            continue
        out.append(vocab.itos[i])
    return " ".join(out)


@dataclass
class SampleRecord:
    sample_id: str
    volume_path: str
    label: str
    description: str
    question: str
    answer: str
    seed: int


@dataclass
class Manifest:
    name: str
    dim: int
    records: list = field(default_factory=list)

    @property
    def class_counts(self):
        counts = Counter(r.label for r in self.records)
        return {c: counts.get(c, 0) for c in CLASSES}

    def by_id(self, sample_id):
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(f"sample {sample_id!r} not in manifest {self.name!r}")


def build_texts(record, vocab):
    """(description, question, answer) ids.

    The description starts with BOS (its pooled embedding for contrastive
    alignment is read there); the question starts with the ``question:``
    marker; the answer ends with EOS.
    """
    t = tokenize(record.description, vocab, bos=True)
    q = np.concatenate([[vocab.question_id], tokenize(record.question, vocab)]).astype(np.int64)
    a = tokenize(record.answer, vocab, eos=True)
    return t, q, a


def qa_text(record):
    return f"{record.question} {record.answer}"


# --------------------------------------------------------------------------
# generator


def _smooth_background(rng, dim):
    noise = rng.standard_normal((dim, dim, dim))
    smooth = ndimage.gaussian_filter(noise, sigma=dim / 10.0, mode="wrap")
    smooth = (smooth - smooth.min()) / max(smooth.max() - smooth.min(), 1e-12)
    return 0.45 + 0.4 * smooth


def _ventricle_mask(dim, radius, axes=(1.0, 0.8, 1.2)):
    c = (dim - 1) / 2.0
    z, y, x = np.meshgrid(*(np.arange(dim) - c,) * 3, indexing="ij")
    r = np.sqrt((z / axes[0]) ** 2 + (y / axes[1]) ** 2 + (x / axes[2]) ** 2)
    return r <= radius


def describe(rng, label, ambiguous=False, text_noise=0.0):
    """Clinical text; scores come from the class ranges unless ambiguous/noised."""
    age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1))
    sex = "female" if rng.random() < 0.5 else "male"
    edu = int(rng.integers(EDU_RANGE[0], EDU_RANGE[1] + 1))
    score_cls = label
    if ambiguous:
        mmse = int(rng.integers(12, 31))
        cdr = str(rng.choice(["0", "0.5", "1", "2"]))
    else:
        if text_noise > 0 and rng.random() < text_noise:
            others = [c for c in CLASSES if c != label]
            score_cls = others[int(rng.integers(len(others)))]
        lo, hi = MMSE_RANGE[score_cls]
        mmse = int(rng.integers(lo, hi + 1))
        cdr = str(rng.choice(CDR_VALUES[score_cls]))
    return f"age {age} , sex {sex} , education {edu} years , mmse {mmse} , cdr {cdr} ."


def generate_sample(label, seed, dim, ambiguous=False, text_noise=0.0, volume_path=""):
    """One (record, volume) pair; a pure function of its arguments."""
    if label not in CLASSES:
        raise ValueError(f"unknown class {label!r}; expected one of {CLASSES}")
    # the background depends on (seed, dim) only, so matched seeds differ just in the ellipsoid
    vol = _smooth_background(np.random.default_rng([seed, dim]), dim)
    rng = np.random.default_rng([seed, CLASSES.index(label), dim])
    r0 = dim / 10.0
    radius = RADIUS_FACTOR[label] * r0 * (1.0 + rng.uniform(-0.1, 0.1))
    mask = _ventricle_mask(dim, radius)
    vol[mask] = 0.1 * vol[mask]
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    text = describe(rng, label, ambiguous=ambiguous, text_noise=text_noise)
    record = SampleRecord(
        sample_id=f"{label.lower()}-{seed:06d}",
        volume_path=str(volume_path),
        label=label,
        description=text,
        question=QUESTION,
        answer=ANSWERS[label],
        seed=int(seed),
    )
    return record, vol


def central_intensity(volume, frac=0.25):
    """Mean voxel value inside the centred sphere of radius ``frac * dim``."""
    dim = volume.shape[0]
    return float(volume[_ventricle_mask(dim, frac * dim, axes=(1, 1, 1))].mean())


def generate_dataset(out_dir, name, per_class, dim, seed=0, ambiguous=False, text_noise=0.0,
                     classes=CLASSES):
    """Write volumes plus ``<name>.tsv``; returns the manifest.

    Every sample gets its own seed, offset by ``seed * 1_000_003`` so datasets
    with different base seeds never share backgrounds.
    """
    out_dir = Path(out_dir)
    vol_dir = out_dir / f"{name}_volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(name=name, dim=dim)
    for k in range(per_class):
        for j, label in enumerate(classes):
            s = seed * 1_000_003 + k * len(classes) + j
            rec, vol = generate_sample(label, s, dim, ambiguous=ambiguous, text_noise=text_noise)
            path = vol_dir / f"{rec.sample_id}.vol"
            write_volume(path, vol)
            rec.volume_path = str(path.relative_to(out_dir))
            manifest.records.append(rec)
    write_manifest(manifest, out_dir / f"{name}.tsv")
    return manifest


# --------------------------------------------------------------------------
# manifest files: header line, then one tab-separated record per line

_FIELDS = ("sample_id", "volume_path", "label", "description", "question", "answer", "seed")


def write_manifest(manifest, path):
    lines = [f"#medblip-manifest\t{manifest.name}\t{manifest.dim}"]
    for rec in manifest.records:
        values = [str(getattr(rec, f)) for f in _FIELDS]
        for v in values:
            if "\t" in v or "\n" in v:
                raise ManifestError(f"record {rec.sample_id!r}: field contains a tab or newline")
        lines.append("\t".join(values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, check_volumes=True):
    """Parse a manifest; volume paths are resolved relative to its directory."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty file")
    head = lines[0].split("\t")
    if len(head) != 3 or head[0] != "#medblip-manifest":
        raise ManifestError(f"{path}: line 1: bad header {lines[0]!r}")
    try:
        manifest = Manifest(name=head[1], dim=int(head[2]))
    except ValueError:
        raise ManifestError(f"{path}: line 1: dim is not an integer") from None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(_FIELDS):
            raise ManifestError(f"{path}: line {lineno}: expected {len(_FIELDS)} fields, got {len(parts)}")
        kw = dict(zip(_FIELDS, parts))
        try:
            kw["seed"] = int(kw["seed"])
        except ValueError:
            raise ManifestError(f"{path}: line {lineno}: seed is not an integer") from None
        if kw["label"] not in CLASSES:
            raise ManifestError(f"{path}: line {lineno}: unknown class {kw['label']!r}")
        rec = SampleRecord(**kw)
        if check_volumes and not (path.parent / rec.volume_path).is_file():
            raise ManifestError(f"{path}: line {lineno}: volume file for sample {rec.sample_id!r} is missing")
        manifest.records.append(rec)
    return manifest


def load_volume(manifest_path, record):
    return read_volume(Path(manifest_path).parent / record.volume_path)
