"""A short tour: make a toy dataset, train briefly, then ask the model questions.

Run from the repository root:  python3 demos/walkthrough.py [--steps N]
Default settings take about two minutes on one core.
"""

import argparse
import json
import tempfile
from pathlib import Path

from medblip.config import RunConfig
from medblip.data import QUESTION, generate_dataset
from medblip.harness import count_params, eval_zeroshot, generate, load_dataset, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--out", default=None, help="keep the run here instead of a temp dir")
    args = ap.parse_args()

    root = Path(args.out or tempfile.mkdtemp(prefix="medblip_demo_"))
    # 3 classes, 60 training and 20 test scans each, 32^3 voxels
    generate_dataset(root, "train", 60, 32, seed=0)
    generate_dataset(root, "test", 20, 32, seed=1)

    cfg = RunConfig(train_manifest=str(root / "train.tsv"), test_manifest=str(root / "test.tsv"),
                    out_dir=str(root / "run"), steps=args.steps)
    store, metrics = train(cfg)
    curve = metrics.losses()
    print(f"L_total {curve[0]:.3f} -> {curve[-1]:.3f} over {len(curve)} steps")

    report = count_params(store, cfg)
    print("learnable", report["learnable"], "of", report["total"], "| adapter scalars", report["lora_delta"])

    test = load_dataset(cfg.test_manifest, cfg)
    for method in ("generate", "rank"):
        res = eval_zeroshot(store, cfg, test, method=method)
        print(f"{method:>8s} accuracy {res.accuracy:.3f}  ({res.note})")

    for rec in test.records[:3]:
        answer = generate(store, cfg, test, rec.sample_id, QUESTION)
        print(json.dumps({"sample": rec.sample_id, "truth": rec.label, "description": rec.description,
                          "answer": answer}))


if __name__ == "__main__":
    main()
