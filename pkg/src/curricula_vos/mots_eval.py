"""MOTS metrics (sMOTSA, MOTSA, MOTSP, Recall, Precision) averaged by sequence."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .annotations import FrameAnnotation, SequenceAnnotation
from .masks import mask_iou

log = logging.getLogger(__name__)

METRIC_NAMES = ("sMOTSA", "MOTSP", "Recall", "Precision", "MOTSA")
TALLY_NAMES = ("tp", "fp", "fn", "ids", "soft_tp", "gt_total")
CSV_COLUMNS = ("sequence_id",) + METRIC_NAMES + TALLY_NAMES


class EmptyGroundTruthError(ValueError):
    pass


@dataclass
class SequenceTallies:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    soft_tp: float = 0.0
    gt_total: int = 0

    def __add__(self, other: SequenceTallies) -> SequenceTallies:
        return SequenceTallies(*(getattr(self, n) + getattr(other, n) for n in TALLY_NAMES))


@dataclass
class SequenceMetrics:
    sMOTSA: float
    MOTSP: float
    Recall: float
    Precision: float
    MOTSA: float
    tallies: SequenceTallies
    # metrics whose denominator was zero and were set to 0 by convention
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class MetricsReport:
    per_sequence: dict[str, SequenceMetrics]
    averaged: dict[str, float]
    skipped: list[str] = field(default_factory=list)


def metrics_from_tallies(t: SequenceTallies) -> SequenceMetrics:
    if t.gt_total == 0:
        raise EmptyGroundTruthError("sequence has no ground-truth masks")
    undefined = []
    if t.tp > 0:
        motsp = 100.0 * t.soft_tp / t.tp
    else:
        motsp = 0.0
        undefined.append("MOTSP")
    if t.tp + t.fp > 0:
        precision = 100.0 * t.tp / (t.tp + t.fp)
    else:
        precision = 0.0
        undefined.append("Precision")
    return SequenceMetrics(
        sMOTSA=100.0 * (t.soft_tp - t.fp - t.ids) / t.gt_total,
        MOTSP=motsp,
        Recall=100.0 * t.tp / t.gt_total,
        Precision=precision,
        MOTSA=100.0 * (t.tp - t.fp - t.ids) / t.gt_total,
        tallies=t,
        undefined=tuple(undefined),
    )


def _scorable_predictions(pred: FrameAnnotation, ignore: np.ndarray, class_id: int | None):
    kept = []
    for e in pred.objects(class_id):
        area = np.count_nonzero(e.mask)
        if area == 0:
            continue
        if np.count_nonzero(e.mask & ignore) > 0.5 * area:
            continue
        kept.append(e)
    return kept


def _frame_tally(gt: FrameAnnotation, pred: FrameAnnotation, class_id: int | None):
    if gt.entries and pred.entries and gt.image_size != pred.image_size:
        raise ValueError(f"frame {gt.frame_index}: image size {gt.image_size} vs {pred.image_size}")
    gts = [e for e in gt.objects(class_id) if e.mask.any()]
    ignore = gt.ignore_mask() if gt.entries else np.zeros(pred.image_size, dtype=bool)
    preds = _scorable_predictions(pred, ignore, class_id)
    matches = []
    used: set[int] = set()
    for g in gts:
        for j, p in enumerate(preds):
            if j in used:
                continue
            iou = mask_iou(g.mask, p.mask)
            # Disjoint masks admit at most one partner with IoU > 0.5.
            if iou > 0.5:
                matches.append((g.track_id, p.track_id, iou))
                used.add(j)
                break
    return matches, len(gts), len(preds)


def match_frame(
    gt: FrameAnnotation, pred: FrameAnnotation, class_id: int | None = None
) -> list[tuple[int, int, float]]:
    """Unique GT/prediction pairs with IoU strictly above 0.5."""
    return _frame_tally(gt, pred, class_id)[0]


def count_id_switches(matches_over_time: Sequence[Sequence[tuple[int, int, float]]]) -> int:
    last: dict[int, int] = {}
    switches = 0
    for matches in matches_over_time:
        for gt_id, pred_id, _ in matches:
            if gt_id in last and last[gt_id] != pred_id:
                switches += 1
            last[gt_id] = pred_id
    return switches


def sequence_tallies(
    gt: SequenceAnnotation, pred: SequenceAnnotation, class_id: int | None = None
) -> SequenceTallies:
    frames = sorted(set(gt.frames) | set(pred.frames))
    t = SequenceTallies()
    per_frame = []
    for f in frames:
        matches, n_gt, n_pred = _frame_tally(gt.frame(f), pred.frame(f), class_id)
        per_frame.append(matches)
        t.tp += len(matches)
        t.fp += n_pred - len(matches)
        t.fn += n_gt - len(matches)
        t.gt_total += n_gt
        t.soft_tp += sum(m[2] for m in matches)
    t.ids = count_id_switches(per_frame)
    return t


def sequence_metrics(
    gt: SequenceAnnotation, pred: SequenceAnnotation, class_id: int | None = None
) -> SequenceMetrics:
    return metrics_from_tallies(sequence_tallies(gt, pred, class_id))


def average_by_sequence(reports: Mapping[str, SequenceMetrics] | Sequence[SequenceMetrics]) -> dict[str, float]:
    if isinstance(reports, Mapping):
        items = [reports[k] for k in sorted(reports)]
    else:
        items = list(reports)
    if not items:
        raise ValueError("no sequences to average")
    return {name: sum(getattr(r, name) for r in items) / len(items) for name in METRIC_NAMES}


def pooled_metrics(reports: Mapping[str, SequenceMetrics]) -> dict[str, float]:
    """Benchmark-style metrics from tallies summed over all sequences."""
    total = SequenceTallies()
    for k in sorted(reports):
        total = total + reports[k].tallies
    return metrics_from_tallies(total).as_dict()


def _thread_cap() -> int:
    raw = os.environ.get("CURRICULA_VOS_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer CURRICULA_VOS_THREADS=%r", raw)
    return os.cpu_count() or 1


def evaluate(
    gt: Mapping[str, SequenceAnnotation],
    pred: Mapping[str, SequenceAnnotation],
    class_id: int | None = None,
    threads: int | None = None,
) -> MetricsReport:
    """Score every GT sequence; sequences without GT masks are skipped with a warning."""
    ids = sorted(gt)

    def job(seq_id):
        p = pred.get(seq_id) or SequenceAnnotation(gt[seq_id].image_size)
        return sequence_tallies(gt[seq_id], p, class_id)

    workers = min(threads or _thread_cap(), max(1, len(ids)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            tallies = list(pool.map(job, ids))
    else:
        tallies = [job(s) for s in ids]

    per_sequence, skipped = {}, []
    for seq_id, t in zip(ids, tallies):
        if t.gt_total == 0:
            log.warning("sequence %s has no ground truth for class %s; excluded", seq_id, class_id)
            skipped.append(seq_id)
            continue
        per_sequence[seq_id] = metrics_from_tallies(t)
    if not per_sequence:
        raise EmptyGroundTruthError("no sequence has ground-truth masks")
    return MetricsReport(per_sequence, average_by_sequence(per_sequence), skipped)


def write_csv(report: MetricsReport, path: str | os.PathLike, average: Mapping[str, float] | None = None) -> None:
    average = report.averaged if average is None else average
    total = SequenceTallies()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for seq_id in sorted(report.per_sequence):
            m = report.per_sequence[seq_id]
            total = total + m.tallies
            tallies = asdict(m.tallies)
            writer.writerow([seq_id] + [repr(getattr(m, n)) for n in METRIC_NAMES]
                            + [repr(tallies[n]) for n in TALLY_NAMES])
        tallies = asdict(total)
        writer.writerow(["AVERAGE"] + [repr(average[n]) for n in METRIC_NAMES]
                        + [repr(tallies[n]) for n in TALLY_NAMES])
