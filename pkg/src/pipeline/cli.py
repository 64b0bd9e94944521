"""
Command-line workflows.

    gen-data      write a synthetic dataset and its manifest
    pretrain      train on video-level labels
    finetune      continue on segment verdicts, keep the best holdout checkpoint
    infer         score labeled segments with test-time shifting
    eval          MAP@K of a prediction file
    fuse          rank-fuse prediction files
    tune-weights  Bayesian optimization of fusion weights

Exit codes: 0 success, 1 other failure, 2 usage/config error, 3 data/format error.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from src.data.labels import ground_truth, read_labels
from src.data.manifest import read_manifest
from src.data.synthetic import SynthConfig, synth_generate
from src.ensemble.bayes_opt import tune_weights
from src.ensemble.fusion import fuse_tables, read_weights_report, report_weights, write_weights_report
from src.evaluation.metrics import per_class_ap
from src.evaluation.predictions import read_predictions, write_predictions
from src.pipeline.inference import infer
from src.pipeline.trainer import finetune, make_train_config, pretrain
from src.utils.config import (
    BO_INIT_SAMPLES, BO_ITERATIONS, DATA_DIR, DEFAULT_SEED, FINETUNE_STEPS, MAP_TOP_K,
    PRETRAIN_STEPS,
)
from src.utils.errors import ConfigError, FormatError, SegVidError, ShapeError
from src.utils.logging import logger

FAMILIES = ["netvlad", "nextvlad_mix", "bert", "bert_cross"]


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Any]:
    """--set key=value pairs; values are parsed as JSON when possible."""
    overrides: Dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected key=value, got {pair!r}")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return overrides


def _truth(args) -> Dict[int, set]:
    if args.truth:
        return ground_truth(read_labels(args.truth))
    if args.manifest:
        manifest = read_manifest(args.manifest)
        return ground_truth(manifest.load_labels(args.split))
    raise ConfigError("pass --truth or --manifest")


def cmd_gen_data(args) -> int:
    try:
        config = SynthConfig(
            classes=args.classes, videos=args.videos, frames=args.frames,
            visual_dim=args.visual_dim, audio_dim=args.audio_dim, seed=args.seed,
            label_noise=args.label_noise,
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid synthetic data config: {exc}") from exc
    synth_generate(config, args.out)
    print(f"Manifest written to {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_pretrain(args) -> int:
    manifest = read_manifest(args.manifest)
    config = make_train_config(
        family=args.family, pooling=args.pooling, model=_parse_overrides(args.set),
        batch_size=args.batch_size, learning_rate=args.lr, decay_examples=args.decay_examples,
        steps=args.steps, seed=args.seed, temperature=args.temperature,
        frames=args.frames, sampling=args.sampling,
    )
    result = pretrain(manifest, config, args.out)
    print(f"Checkpoint: {result.checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    manifest = read_manifest(args.manifest)
    if not args.from_scratch and not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint unless --from-scratch is given")
    config = make_train_config(
        family=args.family, pooling=args.pooling, model=_parse_overrides(args.set),
        batch_size=args.batch_size, learning_rate=args.lr, decay_examples=args.decay_examples,
        steps=args.steps, seed=args.seed, temperature=args.temperature,
        eval_every=args.eval_every, top_k=args.topk, segment_fraction=args.segment_fraction,
    )
    checkpoint_in = None if args.from_scratch else args.checkpoint
    result = finetune(manifest, config, args.out, checkpoint_in)
    print(f"Checkpoint: {result.checkpoint} (step {result.best_step}, holdout MAP {result.best_map:.6f})")
    return 0


def cmd_infer(args) -> int:
    manifest = read_manifest(args.manifest)
    infer(
        args.checkpoint, manifest, args.out, split=args.split,
        tta_min=args.tta_min, tta_max=args.tta_max, unit=args.shift_unit,
        top_k=args.topk, workers=args.workers,
    )
    print(f"Predictions: {args.out}")
    return 0


def cmd_eval(args) -> int:
    table = read_predictions(args.predictions)
    truth = _truth(args)
    scores = per_class_ap(table.rankings, truth, args.topk)
    value = table.map_at_k(truth, args.topk)
    logger.info(f"MAP@{args.topk} over {len(scores)} classes: {value:.6f}")
    if args.per_class:
        for class_id in sorted(scores):
            print(f"class {class_id}\tAP {scores[class_id]:.6f}")
    print(f"MAP@{args.topk}\t{value:.6f}")
    return 0


def cmd_fuse(args) -> int:
    tables = [read_predictions(path) for path in args.predictions]
    if args.weights_file:
        report = read_weights_report(args.weights_file)
        weights = report_weights(report, [Path(path).name for path in args.predictions])
    elif args.weights:
        weights = args.weights
    else:
        weights = [1.0] * len(tables)
    if len(weights) != len(tables):
        raise ConfigError(f"{len(weights)} weights for {len(tables)} prediction files")
    write_predictions(fuse_tables(tables, weights, args.topk), args.out)
    print(f"Fused predictions: {args.out}")
    return 0


def cmd_tune_weights(args) -> int:
    tables = [read_predictions(path) for path in args.predictions]
    truth = _truth(args)
    result = tune_weights(tables, truth, k=args.topk, n_init=args.init_samples, n_iter=args.iters, seed=args.seed)
    names = [Path(path).name for path in args.predictions]
    write_weights_report(args.out, names, result.weights)
    if args.fused_out:
        write_predictions(fuse_tables(tables, result.weights, args.topk), args.fused_out)
    for step, (weights, value) in enumerate(result.trajectory):
        logger.debug(f"trajectory {step}: {[round(w, 4) for w in weights]} -> {value:.6f}")
    print(f"Tuned MAP@{args.topk}\t{result.map:.6f}\tstandalone {[round(s, 6) for s in result.standalone]}")
    return 0


def _add_training_flags(parser: argparse.ArgumentParser, steps: int) -> None:
    parser.add_argument("--manifest", required=True, help="Dataset manifest")
    parser.add_argument("--out", required=True, help="Checkpoint to write")
    parser.add_argument("--family", choices=FAMILIES, default=None, help="Model family (default netvlad)")
    parser.add_argument("--pooling", choices=["first", "mean", "attention", "concat"], default=None)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Model hyperparameter override")
    parser.add_argument("--steps", type=int, default=steps)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--decay-examples", type=int, default=None)
    parser.add_argument("--temperature", type=float, default=None)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segvid", description="Video segment classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic dataset")
    gen.add_argument("--out", default=str(DATA_DIR / "synthetic"))
    gen.add_argument("--seed", type=int, default=DEFAULT_SEED)
    gen.add_argument("--classes", type=int, default=SynthConfig().classes)
    gen.add_argument("--videos", type=int, default=SynthConfig().videos)
    gen.add_argument("--frames", type=int, default=SynthConfig().frames)
    gen.add_argument("--visual-dim", type=int, default=SynthConfig().visual_dim)
    gen.add_argument("--audio-dim", type=int, default=SynthConfig().audio_dim)
    gen.add_argument("--label-noise", type=float, default=SynthConfig().label_noise)
    gen.set_defaults(func=cmd_gen_data)

    pre = sub.add_parser("pretrain", help="Train on video-level labels")
    _add_training_flags(pre, PRETRAIN_STEPS)
    pre.add_argument("--frames", type=int, default=None, help="Frames sampled per video")
    pre.add_argument("--sampling", choices=["with_replacement", "subsequence"], default=None)
    pre.set_defaults(func=cmd_pretrain)

    fine = sub.add_parser("finetune", help="Fine-tune on segment labels")
    _add_training_flags(fine, FINETUNE_STEPS)
    fine.add_argument("--checkpoint", help="Pretrained checkpoint")
    fine.add_argument("--from-scratch", action="store_true", help="Start from a fresh initialization")
    fine.add_argument("--segment-fraction", type=float, default=None)
    fine.add_argument("--eval-every", type=int, default=None)
    fine.add_argument("--topk", type=int, default=MAP_TOP_K)
    fine.set_defaults(func=cmd_finetune)

    inf = sub.add_parser("infer", help="Score segments with test-time shifting")
    inf.add_argument("--manifest", required=True)
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--split", default="test")
    inf.add_argument("--tta-min", type=int, default=0)
    inf.add_argument("--tta-max", type=int, default=0)
    inf.add_argument("--shift-unit", type=int, default=1)
    inf.add_argument("--topk", type=int, default=MAP_TOP_K)
    inf.add_argument("--workers", type=int, default=1)
    inf.add_argument("--seed", type=int, default=DEFAULT_SEED,
                     help="Accepted like the other subcommands; inference draws no random numbers")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="MAP@K of a prediction file")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--truth", help="Segment label file")
    ev.add_argument("--manifest")
    ev.add_argument("--split", default="test")
    ev.add_argument("--topk", type=int, default=MAP_TOP_K)
    ev.add_argument("--per-class", action="store_true")
    ev.set_defaults(func=cmd_eval)

    fuse = sub.add_parser("fuse", help="Rank-fuse prediction files")
    fuse.add_argument("--predictions", nargs="+", required=True)
    fuse.add_argument("--weights", nargs="+", type=float)
    fuse.add_argument("--weights-file", help="Report written by tune-weights")
    fuse.add_argument("--out", required=True)
    fuse.add_argument("--topk", type=int, default=MAP_TOP_K)
    fuse.set_defaults(func=cmd_fuse)

    tune = sub.add_parser("tune-weights", help="Tune fusion weights on local MAP")
    tune.add_argument("--predictions", nargs="+", required=True)
    tune.add_argument("--truth")
    tune.add_argument("--manifest")
    tune.add_argument("--split", default="holdout")
    tune.add_argument("--out", required=True, help="Weights report")
    tune.add_argument("--fused-out", help="Also write the fused predictions")
    tune.add_argument("--iters", type=int, default=BO_ITERATIONS)
    tune.add_argument("--init-samples", type=int, default=BO_INIT_SAMPLES)
    tune.add_argument("--topk", type=int, default=MAP_TOP_K)
    tune.add_argument("--seed", type=int, default=DEFAULT_SEED)
    tune.set_defaults(func=cmd_tune_weights)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error(f"{args.command}: {exc}")
        return 2
    except (FormatError, ShapeError) as exc:
        logger.error(f"{args.command}: {exc}")
        return 3
    except SegVidError as exc:
        logger.error(f"{args.command}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
