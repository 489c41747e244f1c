"""``bccseg`` command line: synth, train, predict, eval, metrics, ops.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Every flag and input path is validated before any file is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .evaluation import evaluate_mask_dirs, evaluate_model
from .metrics import SLIDE_THRESHOLD, slide_classify
from .model import OUTPUT_STRIDE, ConfigError, ModelConfig, build_model, predict_mask
from .opcount import count_ops
from .tensor import NonFiniteError
from .train import TrainConfig, fit, load_checkpoint

logger = logging.getLogger("bccseg")

OVERLAY_RGB = np.array([255.0, 0.0, 0.0])
OVERLAY_ALPHA = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# flag parsing helpers
# ---------------------------------------------------------------------------


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _weight_pair(text: str) -> tuple:
    try:
        pair = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    if len(pair) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return pair


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    p.add_argument("--stem-channels", type=int, default=d.stem_channels)
    p.add_argument("--block-channels", type=_int_list, default=d.block_channels)
    p.add_argument("--middle-blocks", type=int, default=d.middle_blocks)
    p.add_argument("--aspp-channels", type=int, default=d.aspp_channels)
    p.add_argument("--aspp-rates", type=_int_list, default=d.aspp_rates)


def _model_config(args, seed: int) -> ModelConfig:
    return ModelConfig(
        stem_channels=args.stem_channels,
        block_channels=args.block_channels,
        middle_blocks=args.middle_blocks,
        aspp_channels=args.aspp_channels,
        aspp_rates=args.aspp_rates,
        seed=seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bccseg", description="Frozen-section tumor segmentation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--positive-fraction", type=float, default=0.48)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--height", type=int, default=144)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--class-weights", type=_weight_pair, default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--log", type=Path, default=None, help="training log CSV (default: CHECKPOINT.log.csv)")
    _add_model_flags(p)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--mask-out", required=True, type=Path)
    p.add_argument("--overlay-out", type=Path, default=None)
    p.add_argument("--threshold-fraction", type=float, default=SLIDE_THRESHOLD)

    p = sub.add_parser("eval", help="evaluate a model on the test split")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--roc", required=True, type=Path)
    p.add_argument("--pr", required=True, type=Path)
    p.add_argument("--threshold-fraction", type=float, default=SLIDE_THRESHOLD)
    p.add_argument("--prob-threshold", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--split", choices=D.SPLITS, default="test")

    p = sub.add_parser("metrics", help="evaluate prediction masks against ground truth")
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--gt-dir", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--roc", type=Path, default=None)
    p.add_argument("--pr", type=Path, default=None)
    p.add_argument("--threshold-fraction", type=float, default=SLIDE_THRESHOLD)

    p = sub.add_parser("ops", help="parameter and MAC report")
    p.add_argument("--width", required=True, type=int)
    p.add_argument("--height", required=True, type=int)
    p.add_argument("--json", type=Path, default=None)
    _add_model_flags(p)
    return parser


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise UsageError(f"{what} not found: {path}")


def _require_writable(*paths) -> None:
    for path in paths:
        if path is not None and not path.parent.is_dir():
            raise UsageError(f"output directory does not exist: {path.parent}")


def _check_fraction(value: float, flag: str) -> None:
    if not 0 < value < 1:
        raise UsageError(f"{flag} must be in (0, 1), got {value}")


def _check_seed(seed: int) -> None:
    if not 0 <= seed < 2**64:
        raise UsageError(f"--seed must be an unsigned 64-bit integer, got {seed}")


def _model_sized(records: list) -> list:
    """Resize records whose sides are not multiples of the output stride."""
    out = []
    for r in records:
        h = max(OUTPUT_STRIDE, r.height // OUTPUT_STRIDE * OUTPUT_STRIDE)
        w = max(OUTPUT_STRIDE, r.width // OUTPUT_STRIDE * OUTPUT_STRIDE)
        out.append(r if (h, w) == (r.height, r.width) else D.resize_record(r, h, w))
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if not 0 <= args.positive_fraction <= 1:
        raise UsageError(f"--positive-fraction must be in [0, 1], got {args.positive_fraction}")
    for flag, v in (("--width", args.width), ("--height", args.height)):
        if v < OUTPUT_STRIDE or v % OUTPUT_STRIDE:
            raise UsageError(f"{flag} must be a positive multiple of {OUTPUT_STRIDE}, got {v}")
    _check_fraction(args.train_fraction, "--train-fraction")
    _check_seed(args.seed)
    if args.out.exists() and not args.out.is_dir():
        raise UsageError(f"--out exists and is not a directory: {args.out}")
    ds = D.synth_generate(args.out, args.count, args.positive_fraction, args.width, args.height, args.seed, args.train_fraction)
    n_pos = sum(r.label for r in ds)
    print(f"wrote {len(ds)} images ({n_pos} positive) to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require_dir(args.data, "dataset directory")
    _check_seed(args.seed)
    log_path = args.log or args.checkpoint.with_name(args.checkpoint.name + ".log.csv")
    _require_writable(args.checkpoint, log_path)
    try:
        config = _model_config(args, args.seed)
        tconf = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            class_weights=args.class_weights,
            seed=args.seed,
            checkpoint_path=str(args.checkpoint),
        )
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    dataset = D.load_dataset(args.data)
    records = _model_sized([r for r in dataset if r.split == "train"])
    if not records:
        raise UsageError(f"no training records in {args.data}")
    model = build_model(config)
    report = fit(model, D.Dataset(records), tconf)
    report.write_log(log_path)
    print(f"trained {len(report.steps)} steps; final epoch loss {report.epoch_loss[-1]:.5f}, pixel accuracy {report.epoch_pixel_acc[-1]:.4f}")
    return 0


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Tint tumor pixels red at 50% alpha."""
    out = image.astype(np.float64)
    tumor = mask != 0
    out[tumor] = (1 - OVERLAY_ALPHA) * out[tumor] + OVERLAY_ALPHA * OVERLAY_RGB
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.input, "input image")
    _check_fraction(args.threshold_fraction, "--threshold-fraction")
    _require_writable(args.mask_out, args.overlay_out)
    if args.overlay_out is not None and args.overlay_out.resolve() == args.mask_out.resolve():
        raise UsageError("--overlay-out and --mask-out must differ")
    model, _ = load_checkpoint(args.checkpoint)
    image = D.read_image(args.input)
    h, w = image.shape[:2]
    mh = max(OUTPUT_STRIDE, h // OUTPUT_STRIDE * OUTPUT_STRIDE)
    mw = max(OUTPUT_STRIDE, w // OUTPUT_STRIDE * OUTPUT_STRIDE)
    model_in = image if (mh, mw) == (h, w) else D.resize_image(image, mh, mw)
    _, mask = predict_mask(model, D.normalize(model_in))
    mask = mask[0]
    if (mh, mw) != (h, w):
        mask = D.resize_mask(mask, h, w)
    mask_png = np.where(mask != 0, 255, 0).astype(np.uint8)
    D.write_png(args.mask_out, mask_png)
    if args.overlay_out is not None:
        D.write_png(args.overlay_out, overlay(image, mask_png))
    verdict = slide_classify(mask_png, args.input.stem, threshold_fraction=args.threshold_fraction)
    call = "positive" if verdict.predicted else "negative"
    print(f"{call} {verdict.positive_pixel_count}/{verdict.total_pixels} tumor pixels")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_dir(args.data, "dataset directory")
    _check_fraction(args.threshold_fraction, "--threshold-fraction")
    if args.prob_threshold is not None:
        _check_fraction(args.prob_threshold, "--prob-threshold")
    if args.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {args.threads}")
    outputs = [args.report, args.roc, args.pr]
    if len({p.resolve() for p in outputs}) != 3:
        raise UsageError("--report, --roc and --pr must be distinct paths")
    _require_writable(*outputs)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = D.load_dataset(args.data)
    records = _model_sized(dataset.split(args.split))
    if not records:
        raise UsageError(f"no {args.split} records in {args.data}")
    result = evaluate_model(model, records, args.threshold_fraction, args.prob_threshold, args.threads)
    result.write(args.report, args.roc, args.pr)
    s = result.summary
    print(
        f"mean IOU {s['mean_iou']:.4f}  ROC AUC {_fmt(s['roc_auc'])}  PR AUC {_fmt(s['pr_auc'])}  "
        f"slide accuracy {s['slide_accuracy']:.4f} on {s['n_test_images']} images"
    )
    return 0


def cmd_metrics(args) -> int:
    _require_dir(args.pred_dir, "prediction directory")
    _require_dir(args.gt_dir, "ground-truth directory")
    _check_fraction(args.threshold_fraction, "--threshold-fraction")
    _require_writable(args.report, args.roc, args.pr)
    result = evaluate_mask_dirs(args.pred_dir, args.gt_dir, args.threshold_fraction)
    result.write(args.report, args.roc, args.pr)
    s = result.summary
    print(f"mean IOU {s['mean_iou']:.4f}  slide accuracy {s['slide_accuracy']:.4f} on {s['n_test_images']} images")
    return 0


def cmd_ops(args) -> int:
    for flag, v in (("--width", args.width), ("--height", args.height)):
        if v < OUTPUT_STRIDE or v % OUTPUT_STRIDE:
            raise UsageError(f"{flag} must be a positive multiple of {OUTPUT_STRIDE}, got {v}")
    try:
        config = _model_config(args, 42)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    _require_writable(args.json)
    report = count_ops(config, args.height, args.width)
    print(report.format_table())
    if args.json is not None:
        args.json.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "ops": cmd_ops,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"bccseg: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError) as exc:
        # ConfigError, DatasetError, CheckpointError and fit preconditions
        print(f"bccseg {args.command}: error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (NonFiniteError, OSError) as exc:
        print(f"bccseg {args.command}: failed: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
