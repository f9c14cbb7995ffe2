"""Run configuration: every knob of a training/eval run, serialised as JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .lm import LMConfig, LoraSpec
from .qformer import QFormerConfig
from .vision import VisionEncoderConfig
from .volume import PatchGrid


@dataclass
class RunConfig:
    # geometry
    volume_dim: int = 32
    patch_size: int = 8
    aggregate_token: bool = True
    intensity_center: float = 0.5  # subtracted from voxels before projection
    vision_width: int = 64
    vision_layers: int = 2
    vision_heads: int = 4
    vision_seed: int = 1234
    vision_init_std: float = 0.02
    # query bridge
    num_queries: int = 8
    query_width: int = 64
    qformer_layers: int = 2
    qformer_heads: int = 4
    text_layers: int = 2
    max_text_len: int = 32
    # decoder
    lm_width: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    max_seq_len: int = 64
    mode: str = "lora"  # frozen | lora
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: list = field(default_factory=lambda: ["q_proj", "v_proj"])
    lm_warmup_steps: int = 150
    # objective
    order: str = "regular"  # regular | alternative
    use_qa_itc: bool = True
    lambda_lg: float = 1.0
    tau_init: float = 0.07
    # optimiser
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 500
    seed: int = 0
    init_std: float = 0.02
    dtype: str = "float32"
    # data / io
    train_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "runs/default"
    eval_method: str = "generate"  # generate | rank
    rank_per_token: bool = False
    max_new_tokens: int = 6

    def __post_init__(self):
        if self.mode not in ("frozen", "lora"):
            raise ValueError(f"mode must be 'frozen' or 'lora', got {self.mode!r}")
        if self.order not in ("regular", "alternative"):
            raise ValueError(f"order must be 'regular' or 'alternative', got {self.order!r}")
        if self.eval_method not in ("generate", "rank"):
            raise ValueError(f"eval_method must be 'generate' or 'rank', got {self.eval_method!r}")
        self.lora_targets = list(self.lora_targets)

    # derived sub-configs
    @property
    def grid(self):
        return PatchGrid(self.patch_size, self.patch_size, self.volume_dim)

    @property
    def vision(self):
        return VisionEncoderConfig(self.vision_layers, self.vision_heads, self.vision_width, 4, self.vision_seed,
                                   self.vision_init_std)

    @property
    def qformer(self):
        return QFormerConfig(self.num_queries, self.query_width, self.qformer_layers, self.qformer_heads,
                             self.text_layers, self.max_text_len)

    def lm(self, vocab_size):
        return LMConfig(vocab_size, self.lm_width, self.lm_layers, self.lm_heads, self.max_seq_len)

    @property
    def lora(self):
        if self.mode != "lora":
            return None
        return LoraSpec(self.lora_rank, self.lora_alpha, tuple(self.lora_targets))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def micro_config(**overrides):
    """Tiny float64 dims for gradient checking (every width is 4)."""
    base = dict(
        volume_dim=8, patch_size=4, vision_width=4, vision_layers=1, vision_heads=2,
        num_queries=3, query_width=4, qformer_layers=1, qformer_heads=2, text_layers=1,
        lm_width=4, lm_layers=1, lm_heads=2, max_seq_len=36, max_text_len=18, batch_size=3,
        vision_seed=0, init_std=0.5, vision_init_std=0.5, dtype="float64", lm_warmup_steps=0,
    )
    base.update(overrides)
    return RunConfig(**base)
