"""Contrastive-term ablation on data whose descriptions say nothing about the class.

With ``--ambiguous`` data the clinical scores are drawn independently of the
label, so only the scan can separate the classes. Compares training with both
contrastive terms against the description-only term. Each run is ~1.5 min.

    python3 demos/ablation.py --seeds 0 1 2
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from medblip.config import RunConfig
from medblip.data import generate_dataset
from medblip.harness import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    root = Path(tempfile.mkdtemp(prefix="medblip_ablation_"))
    generate_dataset(root, "train", 200, 32, seed=0, ambiguous=True)
    generate_dataset(root, "test", 50, 32, seed=1, ambiguous=True)

    table = {}
    for use_qa in (True, False):
        accs = []
        for seed in args.seeds:
            cfg = RunConfig(train_manifest=str(root / "train.tsv"), test_manifest=str(root / "test.tsv"),
                            out_dir=str(root / f"qa{int(use_qa)}_s{seed}"), seed=seed, use_qa_itc=use_qa)
            _, metrics = train(cfg)
            accs.append(next(e["accuracy"] for e in metrics.entries if e.get("phase") == "eval"))
            fa = metrics.losses(key="l_fa")
            print(f"use_qa_itc={use_qa} seed={seed}: accuracy {accs[-1]:.3f}, L_FA {fa[0]:.2f} -> {fa[-1]:.2f}")
        table[use_qa] = accs
    print(f"median accuracy: both terms {np.median(table[True]):.3f}, "
          f"description only {np.median(table[False]):.3f}")


if __name__ == "__main__":
    main()
