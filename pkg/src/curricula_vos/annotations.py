"""Per-frame and per-sequence instance annotations in KITTI-MOTS text format.

One object per line::

    frame_id track_id class_id img_height img_width rle_string

``track_id`` is ``class_id * 1000 + instance``; track id 10000 marks an
ignore region.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .masks import RLEError, rle_decode, rle_encode

IGNORE_TRACK_ID = 10000
CAR_CLASS = 1


class AnnotationFormatError(ValueError):
    def __init__(self, message: str, path: str | os.PathLike | None = None, lineno: int | None = None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class Entry:
    track_id: int
    class_id: int
    mask: np.ndarray

    @property
    def is_ignore(self) -> bool:
        return self.track_id == IGNORE_TRACK_ID


@dataclass
class FrameAnnotation:
    frame_index: int
    image_size: tuple[int, int]
    entries: list[Entry] = field(default_factory=list)

    def objects(self, class_id: int | None = None) -> list[Entry]:
        """Scorable entries, optionally restricted to one class."""
        return [
            e for e in self.entries
            if not e.is_ignore and (class_id is None or e.class_id == class_id)
        ]

    def ignore_mask(self) -> np.ndarray:
        region = np.zeros(self.image_size, dtype=bool)
        for e in self.entries:
            if e.is_ignore:
                region |= e.mask
        return region

    def by_track(self) -> dict[int, np.ndarray]:
        return {e.track_id: e.mask for e in self.entries if not e.is_ignore}

    def validate(self) -> None:
        ids = [e.track_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_index}: duplicate track ids")
        union = np.zeros(self.image_size, dtype=bool)
        for e in self.entries:
            if e.mask.shape != self.image_size:
                raise ValueError(f"frame {self.frame_index}: mask shape {e.mask.shape} != {self.image_size}")
            if e.is_ignore:
                continue
            if np.any(union & e.mask):
                raise ValueError(f"frame {self.frame_index}: overlapping masks")
            union |= e.mask


@dataclass
class SequenceAnnotation:
    image_size: tuple[int, int]
    frames: dict[int, FrameAnnotation] = field(default_factory=dict)
    num_frames: int | None = None

    def frame(self, index: int) -> FrameAnnotation:
        if index in self.frames:
            return self.frames[index]
        return FrameAnnotation(index, self.image_size)

    @property
    def length(self) -> int:
        if self.num_frames is not None:
            return self.num_frames
        return max(self.frames, default=-1) + 1

    def add(self, frame_index: int, entry: Entry) -> None:
        if frame_index not in self.frames:
            self.frames[frame_index] = FrameAnnotation(frame_index, self.image_size)
        self.frames[frame_index].entries.append(entry)

    def track_ids(self) -> list[int]:
        return sorted({e.track_id for f in self.frames.values() for e in f.entries if not e.is_ignore})

    def __eq__(self, other) -> bool:
        if not isinstance(other, SequenceAnnotation) or self.image_size != other.image_size:
            return False
        return list(iter_lines(self)) == list(iter_lines(other))


def parse_line(line: str, path=None, lineno: int | None = None) -> tuple[int, Entry]:
    parts = line.split()
    if len(parts) != 6:
        raise AnnotationFormatError(f"expected 6 fields, got {len(parts)}", path, lineno)
    try:
        frame_id, track_id, class_id, height, width = (int(p) for p in parts[:5])
    except ValueError as exc:
        raise AnnotationFormatError(f"non-integer field ({exc})", path, lineno) from None
    if frame_id < 0 or height <= 0 or width <= 0:
        raise AnnotationFormatError("negative frame id or non-positive image size", path, lineno)
    try:
        mask = rle_decode(parts[5], height, width)
    except RLEError as exc:
        raise AnnotationFormatError(f"bad RLE: {exc}", path, lineno) from None
    return frame_id, Entry(track_id, class_id, mask)


def parse_text(text: str, path=None, num_frames: int | None = None) -> SequenceAnnotation:
    seq: SequenceAnnotation | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        frame_id, entry = parse_line(raw, path, lineno)
        if seq is None:
            seq = SequenceAnnotation(entry.mask.shape, num_frames=num_frames)
        elif entry.mask.shape != seq.image_size:
            raise AnnotationFormatError(
                f"image size {entry.mask.shape} differs from {seq.image_size}", path, lineno
            )
        if any(e.track_id == entry.track_id for e in seq.frame(frame_id).entries):
            raise AnnotationFormatError(f"duplicate track id {entry.track_id} in frame {frame_id}", path, lineno)
        seq.add(frame_id, entry)
    if seq is None:
        seq = SequenceAnnotation((0, 0), num_frames=num_frames)
    return seq


def load_sequence(path: str | os.PathLike, num_frames: int | None = None) -> SequenceAnnotation:
    return parse_text(Path(path).read_text(), path=path, num_frames=num_frames)


def load_sequences(path: str | os.PathLike) -> dict[str, SequenceAnnotation]:
    """A single annotation file, or a directory of ``<sequence_id>.txt`` files."""
    path = Path(path)
    if path.is_dir():
        return {p.stem: load_sequence(p) for p in sorted(path.glob("*.txt"))}
    return {path.stem: load_sequence(path)}


def iter_lines(seq: SequenceAnnotation) -> Iterator[str]:
    h, w = seq.image_size
    for frame_id in sorted(seq.frames):
        for e in sorted(seq.frames[frame_id].entries, key=lambda e: e.track_id):
            yield f"{frame_id} {e.track_id} {e.class_id} {h} {w} {rle_encode(e.mask)}"


def format_sequence(seq: SequenceAnnotation) -> str:
    return "".join(line + "\n" for line in iter_lines(seq))


def write_sequence(seq: SequenceAnnotation, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_sequence(seq))


def from_track_masks(
    per_frame: Iterable[dict[int, np.ndarray]], image_size: tuple[int, int], class_id: int = CAR_CLASS
) -> SequenceAnnotation:
    """Build an annotation from per-frame ``{track_id: mask}`` dicts, dropping empty masks."""
    seq = SequenceAnnotation(tuple(image_size))
    n = 0
    for t, masks in enumerate(per_frame):
        n = t + 1
        for tid in sorted(masks):
            if masks[tid].any():
                seq.add(t, Entry(tid, class_id, np.asarray(masks[tid], dtype=bool)))
    seq.num_frames = n
    return seq
