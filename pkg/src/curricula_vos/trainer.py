"""Epoch loop tying the curricula, clip sampling, model and evaluation together."""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import curriculum as cur
from .annotations import CAR_CLASS, SequenceAnnotation, from_track_masks
from .masks import resolve_overlaps
from .model import (
    ModelParams, batch_loss_and_grad, init_params, load_checkpoint, predict_sequence, save_checkpoint,
)
from .mots_eval import MetricsReport, evaluate
from .optim import Adam
from .synthgen import Sequence, load_dataset

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = ("epoch", "p_gt", "skip", "loss", "smotsa", "motsp", "recall", "precision")


class TrainingError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    """Invalid configuration or dataset, detected before the first epoch."""


@dataclass
class TrainConfig:
    data: str = ""
    out: str = ""
    run_id: str = "run"
    total_epochs: int = 40
    clips_per_epoch: int = 0  # 0: one clip per training sequence
    batch_size: int = 4
    clip_length: int = 5
    height: int = 0  # 0: take from the dataset
    width: int = 0
    schedule: cur.ScheduleKind = cur.ScheduleKind.FORWARD_STEP
    epsilon: float = 0.01
    k: float = 5.0
    skip: cur.SkipScheme = cur.SkipScheme.NONE
    skip_at_gt: bool = True
    skip_at_pred: bool = False
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 5
    eval_fraction: float = 0.2
    channels: int = 8
    hidden: int = 8
    threshold: float = 0.5
    class_id: int = CAR_CLASS

    def __post_init__(self):
        if self.clip_length < 2:
            raise TrainConfigError(f"clip_length must be >= 2, got {self.clip_length}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise TrainConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.clips_per_epoch < 0:
            raise TrainConfigError("clips_per_epoch must be >= 0")
        if (self.height or self.width) and (self.height % 4 or self.width % 4):
            raise TrainConfigError(f"image size {self.height}x{self.width} must be a multiple of 4")
        # construct both curricula once so invalid combinations fail early
        try:
            self.schedule_spec()
            self.skip_schedule()
        except ValueError as exc:
            raise TrainConfigError(str(exc)) from exc

    def schedule_spec(self) -> cur.ScheduleSpec:
        return cur.ScheduleSpec(self.schedule, self.total_epochs, self.epsilon, self.k)

    def skip_schedule(self) -> cur.SkipSchedule:
        return cur.SkipSchedule(self.skip, self.skip_at_gt, self.skip_at_pred,
                                phase_length=math.ceil(self.total_epochs / 2))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> TrainConfig:
        """Build from string or typed values, e.g. a parsed key=value file."""
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise TrainConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = _coerce(types[key], raw)
            except ValueError as exc:
                raise TrainConfigError(f"bad value for {key}: {exc}") from exc
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(type_name: str, raw: Any):
    if not isinstance(raw, str):
        return raw
    if type_name == "bool":
        return parse_bool(raw)
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "cur.ScheduleKind":
        return cur.ScheduleKind(raw)
    if type_name == "cur.SkipScheme":
        return cur.SkipScheme(raw)
    return raw


def parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


@dataclass
class EpochRecord:
    epoch: int
    p_gt: float
    skip: int
    loss: float
    wall_clock: float
    metrics: dict[str, float] | None = None


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for r in self.records:
                m = r.metrics or {}
                w.writerow([r.epoch, repr(r.p_gt), r.skip, repr(r.loss)] + [
                    repr(m[k]) if k in m else "" for k in ("sMOTSA", "MOTSP", "Recall", "Precision")
                ])

    @classmethod
    def read_csv(cls, path: str | Path) -> RunLog:
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                metrics = None
                if row["smotsa"]:
                    metrics = {k: float(row[c]) for k, c in
                               (("sMOTSA", "smotsa"), ("MOTSP", "motsp"), ("Recall", "recall"), ("Precision", "precision"))}
                records.append(EpochRecord(int(row["epoch"]), float(row["p_gt"]), int(row["skip"]),
                                           float(row["loss"]), 0.0, metrics))
        return cls(records)


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_smotsa: float
    runlog: RunLog
    out_dir: Path | None = None


def split_sequences(sequences: list[Sequence], eval_fraction: float) -> tuple[list[Sequence], list[Sequence]]:
    """The trailing ``eval_fraction`` of sequences (at least one) is held out."""
    if len(sequences) < 2:
        raise ValueError("need at least two sequences to hold one out for evaluation")
    n_eval = min(len(sequences) - 1, max(1, round(eval_fraction * len(sequences))))
    return sequences[:-n_eval], sequences[-n_eval:]


def foreground_log_odds(sequences: list[Sequence], class_id: int = CAR_CLASS) -> float:
    """Log-odds of a pixel belonging to an annotated object, averaged over all frames and objects."""
    fg = total = 0
    for seq in sequences:
        T, H, W = seq.frames.shape
        n_obj = max(1, len(seq.annotation.track_ids()))
        fg += sum(int(e.mask.sum()) for f in seq.annotation.frames.values() for e in f.objects(class_id))
        total += T * H * W * n_obj
    rate = min(max(fg / total, 1e-4), 1 - 1e-4)
    return math.log(rate / (1 - rate))


def _clip_arrays(seq: Sequence, indices: tuple[int, ...], class_id: int):
    first = seq.annotation.frame(indices[0])
    track_ids = sorted(e.track_id for e in first.objects(class_id) if e.mask.any())
    H, W = seq.frames.shape[1:]
    masks = np.zeros((len(indices), len(track_ids), H, W))
    for t, f in enumerate(indices):
        present = seq.annotation.frame(f).by_track()
        for n, tid in enumerate(track_ids):
            if tid in present:
                masks[t, n] = present[tid]
    return seq.frames[list(indices)], masks


def infer_sequence(
    params: ModelParams | str | Path,
    frames: np.ndarray,
    first_masks: Mapping[int, np.ndarray],
    threshold: float = 0.5,
    class_id: int = CAR_CLASS,
) -> SequenceAnnotation:
    """Track the given first-frame masks through ``frames``.

    Frame 0 of the result is ``first_masks`` verbatim; later frames are the
    model's probabilities made disjoint by ``resolve_overlaps``.
    """
    if not isinstance(params, ModelParams):
        params = load_checkpoint(params)
    frames = np.asarray(frames, dtype=np.float64)
    H, W = frames.shape[1:]
    track_ids = sorted(first_masks)
    for tid in track_ids:
        if first_masks[tid].shape != (H, W):
            raise ValueError(f"first-frame mask of {tid} has shape {first_masks[tid].shape}, frames are {H}x{W}")
    per_frame = [{tid: np.asarray(first_masks[tid], dtype=bool) for tid in track_ids}]
    if track_ids:
        probs = predict_sequence(params, frames, np.stack([first_masks[t] for t in track_ids]))
        for p in probs:
            per_frame.append(resolve_overlaps(list(zip(track_ids, p)), threshold))
    else:
        per_frame += [{} for _ in range(len(frames) - 1)]
    return from_track_masks(per_frame, (H, W), class_id)


def evaluate_params(
    params: ModelParams, sequences: list[Sequence], threshold: float = 0.5, class_id: int = CAR_CLASS
) -> MetricsReport:
    gt, pred = {}, {}
    for seq in sequences:
        first = {e.track_id: e.mask for e in seq.annotation.frame(0).objects(class_id)}
        gt[seq.seq_id] = seq.annotation
        pred[seq.seq_id] = infer_sequence(params, seq.frames, first, threshold, class_id)
    return evaluate(gt, pred, class_id)


def write_checkpoint(params: ModelParams, path: Path, config: TrainConfig, epoch: int) -> None:
    save_checkpoint(params, path)
    path.with_suffix(path.suffix + ".meta").write_text(config.to_text() + f"epoch={epoch}\n")


def train(config: TrainConfig, sequences: list[Sequence] | None = None) -> TrainResult:
    if sequences is None:
        if not config.data:
            raise TrainConfigError("no dataset given")
        try:
            sequences = load_dataset(config.data)
        except (OSError, ValueError) as exc:
            raise TrainConfigError(f"cannot load dataset {config.data!r}: {exc}") from exc
    try:
        train_seqs, eval_seqs = split_sequences(sequences, config.eval_fraction)
    except ValueError as exc:
        raise TrainConfigError(str(exc)) from exc
    H, W = train_seqs[0].frames.shape[1:]
    if config.height and (config.height, config.width) != (H, W):
        raise TrainConfigError(f"dataset frames are {H}x{W}, config asks for {config.height}x{config.width}")
    if H % 4 or W % 4:
        raise TrainConfigError(f"frame size {H}x{W} must be a multiple of 4")
    for seq in sequences:
        if seq.frames.shape[1:] != (H, W):
            raise TrainConfigError(f"sequence {seq.seq_id} has frame size {seq.frames.shape[1:]}, expected {H}x{W}")
        if len(seq.frames) < config.clip_length:
            raise TrainConfigError(f"sequence {seq.seq_id} is shorter than clip_length {config.clip_length}")

    config = dataclasses.replace(config, height=H, width=W)
    out_dir = Path(config.out) if config.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config.to_text())

    init_seed, data_seed = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(config.channels, config.hidden, np.random.default_rng(init_seed),
                         output_bias=foreground_log_odds(train_seqs, config.class_id))
    if out_dir:
        write_checkpoint(params, out_dir / "init.ckpt", config, -1)
    rng = np.random.default_rng(data_seed)
    opt = Adam(lr=config.lr)
    schedule, skips = config.schedule_spec(), config.skip_schedule()
    n_clips = config.clips_per_epoch or len(train_seqs)
    runlog = RunLog()
    best_params, best_smotsa = params.copy(), -math.inf

    for epoch in range(config.total_epochs):
        t0 = time.perf_counter()
        p_gt = cur.gt_probability(schedule, epoch)
        phase = cur.phase_for_epoch(epoch, config.total_epochs)
        skip = cur.skip_for_epoch(skips, epoch, phase)
        order = np.concatenate([rng.permutation(len(train_seqs))
                                for _ in range(math.ceil(n_clips / len(train_seqs)))])[:n_clips]
        batch_losses = []
        for b in range(0, n_clips, config.batch_size):
            clips = []
            for si in order[b:b + config.batch_size]:
                seq = train_seqs[si]
                clip = cur.sample_clip(len(seq.frames), config.clip_length, skip, rng)
                draws = [cur.sample_use_gt(p_gt, rng) for _ in range(config.clip_length - 2)]
                frames, masks = _clip_arrays(seq, clip.indices, config.class_id)
                if masks.shape[1]:
                    clips.append((frames, masks, draws))
            if not clips:
                continue
            loss, grads = batch_loss_and_grad(params, clips)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b // config.batch_size}, "
                                    f"sequences {[train_seqs[i].seq_id for i in order[b:b + config.batch_size]]}")
            params = ModelParams.from_dict(opt.step(params.to_dict(), grads.to_dict()))
            batch_losses.append(loss)

        record = EpochRecord(epoch, p_gt, skip, float(np.mean(batch_losses)) if batch_losses else math.nan,
                             time.perf_counter() - t0)
        if (epoch + 1) % config.eval_every == 0 or epoch == config.total_epochs - 1:
            report = evaluate_params(params, eval_seqs, config.threshold, config.class_id)
            record.metrics = report.averaged
            if report.averaged["sMOTSA"] > best_smotsa:
                best_smotsa = report.averaged["sMOTSA"]
                best_params = params.copy()
                if out_dir:
                    write_checkpoint(params, out_dir / "best.ckpt", config, epoch)
        runlog.records.append(record)
        log.info("epoch %d p_gt=%.3f skip=%d loss=%.5f%s", epoch, p_gt, skip, record.loss,
                 f" sMOTSA={record.metrics['sMOTSA']:.2f}" if record.metrics else "")

    if out_dir:
        write_checkpoint(params, out_dir / "final.ckpt", config, config.total_epochs - 1)
        runlog.write_csv(out_dir / "runlog.csv")
    return TrainResult(params, best_params, best_smotsa, runlog, out_dir)
