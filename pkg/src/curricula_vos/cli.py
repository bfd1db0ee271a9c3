"""Command-line entry point: ``gen``, ``train``, ``infer``, ``eval`` and ``report``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import curriculum as cur
from .annotations import CAR_CLASS, AnnotationFormatError, load_sequences, write_sequence
from .model import load_checkpoint
from .mots_eval import METRIC_NAMES, evaluate, pooled_metrics, write_csv
from .report import format_table, write_report
from .synthgen import SHAPES, ConfigError, SynthConfig, generate, load_dataset
from .trainer import TrainConfig, TrainConfigError, infer_sequence, parse_bool, read_config_file, train

log = logging.getLogger("curricula_vos")


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0 or h % 4 or w % 4:
        raise argparse.ArgumentTypeError(f"size {h}x{w}: both sides must be positive multiples of 4")
    return h, w


def _bool(text: str) -> bool:
    try:
        return parse_bool(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _shapes(text: str) -> tuple[str, ...]:
    shapes = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in shapes if s not in SHAPES]
    if not shapes or bad:
        raise argparse.ArgumentTypeError(f"shapes must be a comma list drawn from {SHAPES}")
    return shapes


# ------------------------------------------------------------------- gen

def cmd_gen(args: argparse.Namespace) -> int:
    config = SynthConfig(
        num_sequences=args.sequences,
        frames_per_sequence=args.frames,
        height=args.size[0],
        width=args.size[1],
        num_objects=args.objects,
        shapes=args.shapes,
        speed_range=(args.speed_min, args.speed_max),
        size_range=(args.object_min, args.object_max),
        occlusion_allowed=args.occlusion,
        background_noise_sigma=args.noise,
        seed=args.seed,
        class_id=args.class_id,
    )
    ids = generate(config, args.out)
    print(f"wrote {len(ids)} sequences to {args.out}")
    return 0


# ----------------------------------------------------------------- train

# flag -> TrainConfig field; the same names are accepted in --config files
TRAIN_FLAGS = {
    "data": "data", "out": "out", "run_id": "run_id", "schedule": "schedule", "skip": "skip",
    "skip_at_gt": "skip_at_gt", "skip_at_pred": "skip_at_pred", "epochs": "total_epochs",
    "clip_length": "clip_length", "batch": "batch_size", "lr": "lr", "seed": "seed",
    "clips_per_epoch": "clips_per_epoch", "eval_every": "eval_every", "eval_fraction": "eval_fraction",
    "epsilon": "epsilon", "k": "k", "channels": "channels", "hidden": "hidden",
    "threshold": "threshold", "class_id": "class_id",
}


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then ``--config`` file values, then flags given on the command line."""
    values: dict = {}
    if args.config:
        try:
            values.update(read_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    for flag, name in TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    if not values.get("data"):
        raise UsageError("train needs --data (or data= in --config)")
    if not values.get("out"):
        raise UsageError("train needs --out (or out= in --config)")
    config = TrainConfig.from_mapping(values)
    if args.run_id is None and "run_id" not in values:
        config = dataclasses.replace(config, run_id=f"{config.schedule.value}_{config.skip.value}_s{config.seed}")
    return dataclasses.replace(config, out=str(Path(config.out) / config.run_id))


def cmd_train(args: argparse.Namespace) -> int:
    config = build_train_config(args)
    result = train(config)
    last = [r for r in result.runlog.records if r.metrics][-1]
    summary = "  ".join(f"{k}={last.metrics[k]:.2f}" for k in METRIC_NAMES)
    print(f"{config.run_id}: epoch {last.epoch}  {summary}")
    print(f"checkpoints and run log in {result.out_dir}")
    return 0


# ----------------------------------------------------------------- infer

def cmd_infer(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    try:
        sequences = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load dataset {args.data}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        first = {e.track_id: e.mask for e in seq.annotation.frame(0).objects(args.class_id)}
        ann = infer_sequence(params, seq.frames, first, args.threshold, args.class_id)
        write_sequence(ann, out / f"{seq.seq_id}.txt")
    print(f"wrote predictions for {len(sequences)} sequences to {out}")
    return 0


# ------------------------------------------------------------------ eval

def _load_annotations(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{path}: no such file or directory")
    return load_sequences(p)


def cmd_eval(args: argparse.Namespace) -> int:
    gt = _load_annotations(args.gt)
    pred = _load_annotations(args.pred)
    if Path(args.gt).is_file() and Path(args.pred).is_file():
        # a single pair of files is one sequence whatever the file names are
        pred = {next(iter(gt)): next(iter(pred.values()))}
    if not gt:
        raise UsageError(f"{args.gt}: no annotation files")
    class_id = None if args.class_id == 0 else args.class_id
    report = evaluate(gt, pred, class_id)
    average = pooled_metrics(report.per_sequence) if args.pooled else report.averaged
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(report, args.out, average)
    width = max(len("AVERAGE"), *(len(s) for s in report.per_sequence))
    print("  ".join(["sequence".ljust(width)] + [f"{m:>9}" for m in METRIC_NAMES]))
    for seq_id, m in sorted(report.per_sequence.items()):
        print("  ".join([seq_id.ljust(width)] + [f"{getattr(m, n):9.2f}" for n in METRIC_NAMES]))
    label = "POOLED" if args.pooled else "AVERAGE"
    print("  ".join([label.ljust(width)] + [f"{average[n]:9.2f}" for n in METRIC_NAMES]))
    for seq_id in report.skipped:
        print(f"skipped {seq_id}: no ground truth for the selected class", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- report

def cmd_report(args: argparse.Namespace) -> int:
    rows = write_report(args.runs, args.out)
    sys.stdout.write(format_table(rows))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="curricula-vos", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="dataset root directory")
    g.add_argument("--sequences", type=int, default=10, help="number of sequences")
    g.add_argument("--frames", type=int, default=40, help="frames per sequence")
    g.add_argument("--size", type=parse_size, default=(32, 56), help="frame size HxW, multiples of 4")
    g.add_argument("--objects", type=int, default=3, help="objects per sequence (1..4)")
    g.add_argument("--speed-min", type=float, default=0.25, help="pixels per frame")
    g.add_argument("--speed-max", type=float, default=0.75, help="pixels per frame")
    g.add_argument("--object-min", type=int, default=10, help="smallest object extent in pixels")
    g.add_argument("--object-max", type=int, default=16, help="largest object extent in pixels")
    g.add_argument("--shapes", type=_shapes, default=SHAPES, help="comma list of rectangle,disk")
    g.add_argument("--occlusion", type=_bool, default=True, help="allow objects to overlap (true/false)")
    g.add_argument("--noise", type=float, default=0.05, help="background noise sigma")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--class", dest="class_id", type=int, default=CAR_CLASS, help="class id of every object")
    g.set_defaults(func=cmd_gen)

    d = TrainConfig()
    t = sub.add_parser("train", help="train one curriculum configuration",
                       description="Flags override values read from --config (key=value lines using "
                                   "TrainConfig field names, e.g. a run's config.txt).")
    t.add_argument("--config", help="key=value configuration file")
    t.add_argument("--data", help="dataset root written by gen")
    t.add_argument("--out", help="directory that receives <run-id>/")
    t.add_argument("--run-id", help="run name (default: <schedule>_<skip>_s<seed>)")
    t.add_argument("--schedule", choices=[k.value for k in cur.ScheduleKind],
                   help=f"schedule sampling curriculum (default: {d.schedule.value})")
    t.add_argument("--skip", choices=[k.value for k in cur.SkipScheme],
                   help=f"frame-skip scheme (default: {d.skip.value})")
    t.add_argument("--skip-at-gt", type=_bool, help=f"skip frames in the GT phase (default: {str(d.skip_at_gt).lower()})")
    t.add_argument("--skip-at-pred", type=_bool,
                   help=f"skip frames in the prediction phase (default: {str(d.skip_at_pred).lower()})")
    t.add_argument("--epochs", type=int, help=f"total epochs (default: {d.total_epochs})")
    t.add_argument("--clip-length", type=int, help=f"frames per training clip (default: {d.clip_length})")
    t.add_argument("--batch", type=int, help=f"clips per optimizer step (default: {d.batch_size})")
    t.add_argument("--lr", type=float, help=f"Adam learning rate (default: {d.lr})")
    t.add_argument("--seed", type=int, help=f"seed for init, clip sampling and draws (default: {d.seed})")
    t.add_argument("--clips-per-epoch", type=int,
                   help="clips per epoch (default: one per training sequence)")
    t.add_argument("--eval-every", type=int, help=f"evaluate every N epochs (default: {d.eval_every})")
    t.add_argument("--eval-fraction", type=float,
                   help=f"trailing fraction of sequences held out (default: {d.eval_fraction})")
    t.add_argument("--epsilon", type=float, help=f"exponential schedule floor (default: {d.epsilon})")
    t.add_argument("--k", type=float, help=f"inverse-sigmoid schedule constant (default: {d.k})")
    t.add_argument("--channels", type=int, help=f"encoder channels (default: {d.channels})")
    t.add_argument("--hidden", type=int, help=f"ConvLSTM hidden channels (default: {d.hidden})")
    t.add_argument("--threshold", type=float, help=f"mask probability threshold (default: {d.threshold})")
    t.add_argument("--class", dest="class_id", type=int, help=f"class id to track (default: {d.class_id})")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="track first-frame masks through a dataset", formatter_class=fmt)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True, help="dataset root; frame-0 GT masks seed the tracks")
    i.add_argument("--out", required=True, help="directory for <sequence>.txt predictions")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--class", dest="class_id", type=int, default=CAR_CLASS)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions with MOTS metrics", formatter_class=fmt)
    e.add_argument("--gt", required=True, help="annotation file or directory of <sequence>.txt")
    e.add_argument("--pred", required=True, help="annotation file or directory of <sequence>.txt")
    e.add_argument("--class", dest="class_id", type=int, default=CAR_CLASS, help="class id; 0 scores all classes")
    e.add_argument("--out", help="metrics CSV path")
    e.add_argument("--pooled", action="store_true",
                   help="summary row from tallies pooled over sequences instead of the per-sequence mean")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare finished runs", formatter_class=fmt)
    r.add_argument("--runs", required=True, help="directory containing run directories")
    r.add_argument("--out", required=True, help="directory for report.csv, report.txt and SVG plots")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TrainConfigError, AnnotationFormatError, FileNotFoundError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"{parser.prog} {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
