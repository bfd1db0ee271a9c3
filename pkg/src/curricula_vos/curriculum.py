"""Schedule sampling decays, frame-skipping schedules and the clip sampler."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class ScheduleKind(enum.Enum):
    TEACHER_FORCING = "teacher-forcing"
    FORWARD_STEP = "forward-step"
    INVERSE_STEP = "inverse-step"
    FORWARD_LINEAR = "forward-linear"
    INVERSE_LINEAR = "inverse-linear"
    FORWARD_EXPONENTIAL = "forward-exponential"
    INVERSE_SIGMOID = "inverse-sigmoid"

    @property
    def is_inverse(self) -> bool:
        return self in (ScheduleKind.INVERSE_STEP, ScheduleKind.INVERSE_LINEAR)


class SkipScheme(enum.Enum):
    NONE = "none"
    ZERO_TO_NINE = "0to9"
    ONE_TO_FIVE = "1to5"

    @property
    def num_steps(self) -> int:
        return {SkipScheme.NONE: 1, SkipScheme.ZERO_TO_NINE: 10, SkipScheme.ONE_TO_FIVE: 5}[self]


class Phase(enum.Enum):
    GT = "gt"
    PRED = "pred"


@dataclass(frozen=True)
class ScheduleSpec:
    """Maps an epoch to the probability of feeding the ground-truth mask."""

    kind: ScheduleKind = ScheduleKind.FORWARD_STEP
    total_epochs: int = 40
    epsilon: float = 0.01
    k: float = 5.0

    def __post_init__(self):
        if self.total_epochs < 2:
            raise ValueError(f"total_epochs must be >= 2, got {self.total_epochs}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")


@dataclass(frozen=True)
class SkipSchedule:
    scheme: SkipScheme = SkipScheme.NONE
    apply_at_gt_phase: bool = True
    apply_at_pred_phase: bool = False
    phase_length: int = 20

    def __post_init__(self):
        if self.phase_length < self.scheme.num_steps:
            raise ValueError(
                f"phase_length {self.phase_length} shorter than the "
                f"{self.scheme.num_steps} skipping steps of {self.scheme.value}"
            )


@dataclass(frozen=True)
class ClipIndices:
    start: int
    stride: int
    length: int

    @property
    def skip(self) -> int:
        return self.stride - 1

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(self.start + i * self.stride for i in range(self.length))


def gt_probability(spec: ScheduleSpec, epoch: int) -> float:
    """Probability that the recurrent mask input is the ground-truth mask."""
    E = spec.total_epochs
    if not 0 <= epoch < E:
        raise IndexError(f"epoch {epoch} outside [0, {E})")
    kind = spec.kind
    if kind is ScheduleKind.TEACHER_FORCING:
        return 1.0
    if kind is ScheduleKind.FORWARD_STEP:
        return 1.0 if epoch < E / 2 else 0.0
    if kind is ScheduleKind.INVERSE_STEP:
        return 0.0 if epoch < E / 2 else 1.0
    frac = epoch / (E - 1)
    if kind is ScheduleKind.FORWARD_LINEAR:
        return 1.0 - frac
    if kind is ScheduleKind.INVERSE_LINEAR:
        return frac
    if kind is ScheduleKind.FORWARD_EXPONENTIAL:
        return max(spec.epsilon, spec.epsilon**frac)
    if kind is ScheduleKind.INVERSE_SIGMOID:
        p = spec.k / (spec.k + math.exp(epoch / spec.k))
        return min(1.0, max(0.0, p))
    raise ValueError(f"unknown schedule kind {kind!r}")


def sample_use_gt(p: float, rng: np.random.Generator) -> bool:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    return bool(rng.random() < p)


def phase_for_epoch(epoch: int, total_epochs: int) -> Phase:
    # Tied to the midpoint for every schedule kind, not only the step ones.
    return Phase.GT if epoch < total_epochs / 2 else Phase.PRED


def skip_for_epoch(schedule: SkipSchedule, epoch: int, phase: Phase) -> int:
    if epoch < 0:
        raise IndexError(f"negative epoch {epoch}")
    if schedule.scheme is SkipScheme.NONE:
        return 0
    enabled = schedule.apply_at_gt_phase if phase is Phase.GT else schedule.apply_at_pred_phase
    if not enabled:
        return 0
    e = epoch % schedule.phase_length
    if schedule.scheme is SkipScheme.ZERO_TO_NINE:
        return min(9, e // 2)
    return min(5, 1 + e // 4)


class InfeasibleClipError(ValueError):
    pass


def clip_span(clip_length: int, skip: int) -> int:
    return (clip_length - 1) * (skip + 1) + 1


def sample_clip(
    sequence_length: int, clip_length: int, skip: int, rng: np.random.Generator
) -> ClipIndices:
    """Draw a clip of `clip_length` frames spaced `skip + 1` apart.

    When the requested stride does not fit in the sequence the skip is lowered
    to the largest value that does, down to 0.
    """
    if clip_length < 1:
        raise InfeasibleClipError(f"clip_length must be >= 1, got {clip_length}")
    if sequence_length < clip_length:
        raise InfeasibleClipError(
            f"sequence of {sequence_length} frames cannot hold a clip of {clip_length}"
        )
    if skip < 0:
        raise ValueError(f"skip must be >= 0, got {skip}")
    if clip_length > 1 and clip_span(clip_length, skip) > sequence_length:
        skip = (sequence_length - 1) // (clip_length - 1) - 1
    span = clip_span(clip_length, skip)
    start = int(rng.integers(0, sequence_length - span + 1))
    return ClipIndices(start=start, stride=skip + 1, length=clip_length)
