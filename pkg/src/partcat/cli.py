"""Command-line interface: dataset generation, training, evaluation,
gradient checking, ablations, and cost-volume inspection.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


def _guidance_levels(text: str) -> tuple:
    if text in ("none", ""):
        return ()
    if text == "all":
        return ("obj", "part", "obj_part")
    return tuple(g.strip().replace("-", "_") for g in text.split(","))


def _model_config(args):
    from .model import ModelConfig, load_model_config

    config = load_model_config(args.config) if getattr(args, "config", None) \
        else ModelConfig()
    overrides = {}
    if getattr(args, "guidance", None) is not None:
        overrides["guidance_levels"] = _guidance_levels(args.guidance)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return replace(config, **overrides) if overrides else config


def _load_eval_vocab(manifest: Path):
    from .vocab import build_vocabulary, load_class_list

    classes = manifest.parent / "classes.txt"
    if not classes.exists():
        raise FileNotFoundError(f"class list not found next to manifest: {classes}")
    return build_vocabulary(*load_class_list(classes))


def cmd_make_data(args) -> int:
    from .data import build_dataset, demo_scene_spec, demo_vocabulary
    from .evaluation import write_class_sidecar

    vocab = demo_vocabulary()
    spec = demo_scene_spec(h=args.grid, w=args.grid, sigma=args.sigma,
                           jitter=args.jitter, label_noise=args.label_noise)
    holdout = args.holdout.split(",") if args.holdout else None
    manifests = build_dataset(spec, vocab, args.n_train, args.n_eval,
                              args.out, seed=args.seed, split_policy=holdout)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    from .data import load_manifest
    from .trainer import TrainConfig, load_train_config, train

    manifest = Path(args.data)
    vocab = _load_eval_vocab(manifest)
    samples = load_manifest(manifest)
    tc = load_train_config(args.train_config) if args.train_config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.comp is not None:
        overrides["comp_mode"] = {"sm": "softmax", "l1": "l1", "off": "off"}[args.comp]
    if args.checkpoint_interval is not None:
        overrides["checkpoint_interval"] = args.checkpoint_interval
    tc = replace(tc, **overrides) if overrides else tc
    mc = _model_config(args)
    _, log = train(tc, mc, samples, vocab, out_dir=args.out,
                   resume_from=args.resume)
    last = log.entries[-1] if log.entries else {"iteration": -1, "loss": float("nan")}
    print(f"trained {tc.iterations} iterations, final loss {last['loss']:.6f}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint_final.ptnsr'}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import evaluate
    from .trainer import load_params

    manifest = Path(args.data)
    vocab = _load_eval_vocab(manifest)
    samples = load_manifest(manifest)
    params = load_params(args.checkpoint)
    mc = _model_config(args)
    report = evaluate(params, samples, vocab, mc, args.protocol, tau=args.tau)
    sys.stdout.write(report.format_table(vocab))
    if args.out:
        Path(args.out).write_text(report.to_kv(vocab), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    results = run_gradient_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    if worst > 1e-4:
        print(f"FAIL: worst error {worst:.3e} exceeds 1e-4", file=sys.stderr)
        return 2
    print("PASS: all gradients within 1e-4")
    return 0


def cmd_ablate(args) -> int:
    from .data import load_manifest
    from .model import ModelConfig
    from .trainer import (TrainConfig, format_ablation_table, run_ablation,
                          standard_ablation_cells)

    data_dir = Path(args.data)
    vocab = _load_eval_vocab(data_dir / "train.manifest")
    train_samples = load_manifest(data_dir / "train.manifest")
    eval_samples = load_manifest(data_dir / "eval.manifest")
    tc = TrainConfig(iterations=args.iterations)
    mc = ModelConfig()
    cells = standard_ablation_cells(tc, mc, axis=args.axis)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    table = run_ablation(cells, train_samples, eval_samples, vocab,
                         seeds=seeds, tau=args.tau)
    text = format_ablation_table(table)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def cmd_inspect(args) -> int:
    from .data import load_manifest
    from .evaluation import LabelMap
    from .model import forward
    from .trainer import load_params

    manifest = Path(args.data)
    vocab = _load_eval_vocab(manifest)
    samples = load_manifest(manifest)
    sample = samples[args.sample]
    params = load_params(args.checkpoint)
    mc = _model_config(args)
    out = forward(sample.embeddings, params, vocab, mc)
    if args.class_name not in vocab.obj_parts:
        raise ValueError(f"unknown class {args.class_name!r}")
    q = vocab.obj_parts.index(args.class_name)
    column = out.cost_obj_part.numpy()[:, q]
    # map cosine [-1, 1] onto graymap levels 0..254 (255 is reserved)
    levels = np.clip((column + 1.0) * 127.0, 0, 254).astype(np.int64)
    h, w = sample.embeddings.h, sample.embeddings.w
    grid = levels.reshape(h, w)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(args.out).write_bytes(header + grid.astype(np.uint8).tobytes())
    print(f"wrote cost slice for {args.class_name!r} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partcat")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("make-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=24)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--grid", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--holdout", help="comma-separated obj-part names to mark novel")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--data", required=True, help="train manifest path")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", help="model config file")
    p.add_argument("--train-config", help="train config file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--comp", choices=["sm", "l1", "off"])
    p.add_argument("--guidance", help="none|obj|part|obj,part|all")
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True, help="eval manifest path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="model config file")
    p.add_argument("--protocol", choices=["pred-all", "oracle-obj"],
                   default="pred-all")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--guidance")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write key=value report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--axis", choices=["comp", "guidance"], default="comp")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump a cost-volume slice as a P5 graymap")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--class-name", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--guidance")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
