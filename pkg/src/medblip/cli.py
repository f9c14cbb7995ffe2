"""Command-line entry point: ``medblip <subcommand> ...``.

Exit status is 0 only when the command succeeded (for ``gradcheck``: only
when every group passes).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, micro_config
from .data import CLASSES, generate_dataset
from .harness import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    MetricsLog,
    count_params,
    eval_zeroshot,
    generate,
    gradcheck,
    load_dataset,
    load_run,
    train,
)

log = logging.getLogger("medblip")


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(parser):
    """One ``--key`` flag per RunConfig field; unset flags leave the config alone."""
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, dest=f.name, type=_bool, default=None, metavar="BOOL")
        elif f.type in ("int", int):
            parser.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type in ("float", float):
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        elif f.name == "lora_targets":
            parser.add_argument(flag, dest=f.name, default=None, help="comma-separated, e.g. q_proj,v_proj")
        else:
            parser.add_argument(flag, dest=f.name, default=None)


def _config_from_args(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "lora_targets":
            value = [t for t in value.split(",") if t]
        changes[f.name] = value
    return cfg.replace(**changes) if changes else cfg


def cmd_gen_data(args):
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    unknown = [c for c in classes if c not in CLASSES]
    if unknown:
        raise ValueError(f"unknown class(es) {unknown}; choose from {list(CLASSES)}")
    manifest = generate_dataset(args.out, args.name, args.per_class, args.dim, seed=args.seed,
                                ambiguous=args.ambiguous, text_noise=args.text_noise, classes=classes)
    print(f"wrote {len(manifest.records)} samples to {Path(args.out) / (args.name + '.tsv')} "
          f"(class counts {manifest.class_counts})")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    store, metrics = train(cfg)
    summary = [e for e in metrics.entries if e.get("phase") in ("summary", "eval")]
    for e in summary:
        print(json.dumps(e, sort_keys=True))
    print(f"checkpoint: {Path(cfg.out_dir) / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args):
    store, cfg = load_run(args.ckpt)
    data = load_dataset(args.manifest, cfg)
    result = eval_zeroshot(store, cfg, data, method=args.method, per_token=args.per_token)
    if args.records:
        Path(args.records).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.records),
                                      encoding="utf-8")
    print(json.dumps({"accuracy": result.accuracy, "method": result.method, "n": len(result.records),
                      "protocol": result.note}, sort_keys=True))
    return 0


def cmd_generate(args):
    store, cfg = load_run(args.ckpt)
    manifest = args.manifest or cfg.test_manifest or cfg.train_manifest
    if not manifest:
        raise ValueError("no manifest given and none recorded in the run config")
    data = load_dataset(manifest, cfg)
    print(generate(store, cfg, data, args.sample, args.question))
    return 0


def cmd_params(args):
    store, cfg = load_run(args.ckpt)
    report = count_params(store, cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    metrics_path = Path(args.ckpt).parent / METRICS_NAME
    MetricsLog(metrics_path, append=True).append(phase="params", **report)
    return 0


def cmd_gradcheck(args):
    cfg = micro_config(seed=args.seed, vision_seed=args.seed)
    only = set(args.only.split(",")) if args.only else None
    report = gradcheck(cfg, only=only)
    print(report.format())
    return 0 if report.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="medblip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    g.add_argument("--classes", default=",".join(CLASSES), help="comma-separated subset of NC,MCI,DEM")
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--name", default="data")
    g.add_argument("--ambiguous", action="store_true", help="class-independent clinical scores")
    g.add_argument("--text-noise", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a RunConfig; flags override its keys")
    t.add_argument("--config")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot classification accuracy")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--method", choices=("generate", "rank"), default="generate")
    e.add_argument("--per-token", type=_bool, default=None, help="normalise rank scores by answer length")
    e.add_argument("--records", help="write per-sample results as JSON lines")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("generate", help="answer a question about one sample")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--sample", required=True)
    q.add_argument("--question", required=True)
    q.add_argument("--manifest")
    q.set_defaults(func=cmd_generate)

    c = sub.add_parser("params", help="parameter accounting for a checkpoint")
    c.add_argument("--ckpt", required=True)
    c.set_defaults(func=cmd_params)

    k = sub.add_parser("gradcheck", help="finite-difference check of every module")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--only", help="comma-separated check names")
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
