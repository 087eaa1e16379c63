"""
Command line interface: skelseg {synth,train,segment,eval,plot}

Exit codes: 0 success, 2 usage error, 3 data, configuration or checkpoint
error, 4 numeric failure during training.
"""

import argparse
import copy
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SynthConfig, load_manifest, load_sequence, synth_generate
from .errors import ConfigError, DataValidationError, NumericError, SkelsegError
from .losses import LossReport
from .metrics import evaluate, load_predictions, predict_labels, write_predictions
from .plotting import plot_dataset
from .trainer import TrainConfig, Trainer, load_config

logger = logging.getLogger("skelseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def cmd_synth(args) -> int:
    config = SynthConfig(classes=args.classes, sequences=args.sequences, mean_segments=args.mean_segments,
                         seed=args.seed, patch_size=args.patch_size, fps=args.fps, joints=args.joints,
                         joint_dim=args.dim, noise=args.noise)
    synth_generate(args.out, config)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def _resolved(config: TrainConfig, k_gt: int) -> TrainConfig:
    config = copy.deepcopy(config)
    if config.hvq.num_actions is None:
        config.hvq.num_actions = k_gt
    return config


def _comparable(config: TrainConfig) -> dict:
    # epochs may grow on resume; everything else must match the checkpoint
    data = config.to_dict()
    data.pop("epochs")
    return data


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    manifest = load_manifest(args.data)
    sequences = list(manifest.sequences())
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")

    if args.resume:
        state = load_checkpoint(args.resume)
        if _comparable(state.config) != _comparable(_resolved(config, manifest.k_gt)):
            raise ConfigError(f"config differs from the one stored in {args.resume}", "config")
        if (state.joint_dim, state.num_joints) != (manifest.c, manifest.v):
            raise DataValidationError(f"checkpoint expects C={state.joint_dim}, V={state.num_joints}; "
                                      f"data has C={manifest.c}, V={manifest.v}", "v")
        state.config.epochs = config.epochs
        trainer = Trainer(state.config)
    else:
        trainer = Trainer(config)
        state = trainer.init_state(manifest.c, manifest.v, manifest.k_gt)

    append = bool(args.resume) and log_path.exists()
    with open(log_path, "a" if append else "w", encoding="utf-8") as log:
        if not append:
            log.write(LossReport.csv_header() + "\n")
        history = trainer.fit(state, sequences, log=log)
    save_checkpoint(state, out)
    if history:
        print(f"step {state.step}: {history[-1]}")
    else:
        print(f"step {state.step}: no training steps run")
    return EXIT_OK


def cmd_segment(args) -> int:
    state = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    if manifest.v != state.num_joints or manifest.c != state.joint_dim:
        raise DataValidationError(f"checkpoint expects C={state.joint_dim}, V={state.num_joints}; "
                                  f"data has C={manifest.c}, V={manifest.v}", "v")
    trainer = Trainer(state.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for item in manifest.items:
        seq = load_sequence(item, manifest)
        write_predictions(out, item.sequence_id, predict_labels(seq, state, trainer))
    logger.info(f"Wrote predictions for {len(manifest.items)} sequences to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    report = evaluate(manifest, load_predictions(args.pred, manifest))
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(report.summary())
    return EXIT_OK


def cmd_plot(args) -> int:
    manifest = load_manifest(args.data)
    plot_dataset(manifest, load_predictions(args.pred, manifest), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skelseg",
                                     description="Unsupervised skeleton action segmentation by hierarchical "
                                                 "spatiotemporal vector quantization")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a labeled synthetic corpus")
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--classes", type=int, default=4, help="Number of action classes (>= 2)")
    synth.add_argument("--sequences", type=int, default=20)
    synth.add_argument("--mean-segments", type=int, default=8)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--patch-size", type=int, default=10)
    synth.add_argument("--fps", type=int, default=30)
    synth.add_argument("--joints", type=int, default=6)
    synth.add_argument("--dim", type=int, default=3, choices=(2, 3))
    synth.add_argument("--noise", type=float, default=0.05)
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", help="Train a model on a manifest")
    train.add_argument("--config", help="JSON training config (defaults if omitted)")
    train.add_argument("--data", required=True, help="Dataset manifest")
    train.add_argument("--out", required=True, help="Checkpoint path")
    train.add_argument("--log", help="CSV training log (default: checkpoint path with .csv)")
    train.add_argument("--resume", help="Continue from this checkpoint")
    train.set_defaults(handler=cmd_train)

    segment = sub.add_parser("segment", help="Write per-frame cluster ids for every sequence")
    segment.add_argument("--ckpt", required=True)
    segment.add_argument("--data", required=True)
    segment.add_argument("--out", required=True, help="Directory for <id>.pred files")
    segment.set_defaults(handler=cmd_segment)

    evaluate_cmd = sub.add_parser("eval", help="Score predictions against ground truth")
    evaluate_cmd.add_argument("--data", required=True)
    evaluate_cmd.add_argument("--pred", required=True, help="Directory of <id>.pred files")
    evaluate_cmd.add_argument("--out", required=True, help="Report JSON path")
    evaluate_cmd.set_defaults(handler=cmd_eval)

    plot = sub.add_parser("plot", help="Segment-length histograms and timelines as SVG")
    plot.add_argument("--data", required=True)
    plot.add_argument("--pred", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.classes < 2:
        parser.error("--classes must be at least 2")

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    try:
        return args.handler(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except (SkelsegError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
