"""Command-line entry point for the pipeline stages."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import default_config, load_config
from . import stages


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffadapt", description=__doc__)
    parser.add_argument("--config", help="YAML config file (defaults used when omitted)")
    parser.add_argument("--seed", type=int, help="override the top-level seed")
    parser.add_argument("--out", help="override output_root")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain-segmentor", help="train the stand-in pretrained segmentor")
    sub.add_parser("prepare", help="persist priors, sketches, fused labels and captions")
    sub.add_parser("train-dm", help="tune the diffusion model on target priors")

    gen = sub.add_parser("generate", help="sample pseudo-target data with DDIM")
    gen.add_argument("--checkpoint", default="final", help="'initial', 'final' or a checkpoint path")
    gen.add_argument("--source", default="source_labels", choices=["source_labels", "target_prior"])
    gen.add_argument("--name", default=None, help="output run name")

    ref = sub.add_parser("refine", help="refine the segmentor with generated data")
    ref.add_argument("--tag", default="default")

    met = sub.add_parser("metrics", help="evaluate a generation manifest")
    met.add_argument("--manifest", default=None)

    sub.add_parser("sweep-lambda", help="refine across the threshold grid and tabulate")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_root = args.out
    config.validate()

    if args.command == "pretrain-segmentor":
        path = stages.pretrain_segmentor(config)
        print(f"segmentor checkpoint: {path}")
    elif args.command == "prepare":
        result = stages.run_prepare(config)
        print(f"prepare: {result.written} written, {result.skipped} skipped -> {result.prepare_dir}")
    elif args.command == "train-dm":
        result = stages.run_train_dm(config)
        print(f"checkpoints: {result.initial_checkpoint} {result.final_checkpoint}")
        print(f"final smoothed loss: {result.smoothed[-1]:.4f}")
    elif args.command == "generate":
        manifest = stages.run_generate(config, args.checkpoint, args.source, args.name)
        print(f"manifest: {manifest}")
    elif args.command == "refine":
        result = stages.run_refine(config, tag=args.tag)
        print(f"mIoU: {result.pre_miou:.2f} -> {result.post_miou:.2f} (lambda={result.lambda_threshold})")
    elif args.command == "metrics":
        report = stages.run_metrics(config, args.manifest)
        print(report.read_text())
    elif args.command == "sweep-lambda":
        table = stages.sweep_lambda(config)
        print(f"pre-refinement mIoU: {table['pre']:.2f}")
        for key, miou in table["results"].items():
            print(f"  lambda {key}: {miou:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
