"""Moving-shapes video sequences with exact instance masks.

Objects move at constant velocity and bounce elastically off the frame
borders. Higher track ids are drawn on top, and ground-truth masks hold only
the visible pixels, so masks within a frame never overlap.

Layout on disk::

    <root>/manifest.json
    <root>/<seq_id>/frames/000000.pgm ...
    <root>/instances_txt/<seq_id>.txt
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .annotations import CAR_CLASS, SequenceAnnotation, from_track_masks, load_sequence, write_sequence

BACKGROUND_LEVEL = 0.2
SHAPES = ("rectangle", "disk")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_sequences: int = 10
    frames_per_sequence: int = 40
    height: int = 32
    width: int = 56
    num_objects: int = 3
    shapes: tuple[str, ...] = SHAPES
    speed_range: tuple[float, float] = (0.25, 0.75)
    size_range: tuple[int, int] = (10, 16)
    occlusion_allowed: bool = True
    background_noise_sigma: float = 0.05
    seed: int = 0
    class_id: int = CAR_CLASS

    def validate(self) -> None:
        if self.num_sequences < 1 or self.frames_per_sequence < 1:
            raise ConfigError("need at least one sequence and one frame")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"invalid frame size {self.height}x{self.width}")
        if not 1 <= self.num_objects <= 4:
            raise ConfigError(f"num_objects must be in 1..4, got {self.num_objects}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ConfigError(f"shapes must be drawn from {SHAPES}, got {self.shapes}")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid speed_range {self.speed_range}")
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid size_range {self.size_range}")
        if hi > min(self.height, self.width):
            raise ConfigError(
                f"objects up to {hi}px do not fit in a {self.height}x{self.width} frame"
            )
        if self.background_noise_sigma < 0:
            raise ConfigError("background_noise_sigma must be >= 0")


@dataclass
class MovingObject:
    track_id: int
    shape: str
    half_extent: tuple[int, int]  # (rows, cols); a disk uses its radius for both
    center: tuple[float, float]  # (row, col) at frame 0
    velocity: tuple[float, float]  # (drow, dcol) per frame
    intensity: float = 0.8

    def center_at(self, t: int, height: int, width: int) -> tuple[float, float]:
        ry, rx = self.half_extent
        return (
            _reflect(self.center[0] + self.velocity[0] * t, ry, height - 1 - ry),
            _reflect(self.center[1] + self.velocity[1] * t, rx, width - 1 - rx),
        )

    def raster(self, t: int, height: int, width: int) -> np.ndarray:
        cy, cx = self.center_at(t, height, width)
        rows = np.arange(height)[:, None]
        cols = np.arange(width)[None, :]
        ry, rx = self.half_extent
        if self.shape == "disk":
            return (rows - cy) ** 2 + (cols - cx) ** 2 <= ry * ry
        return (np.abs(rows - cy) <= ry) & (np.abs(cols - cx) <= rx)


def _reflect(p: float, lo: float, hi: float) -> float:
    length = hi - lo
    if length <= 0:
        return float(lo)
    u = (p - lo) % (2 * length)
    return lo + (u if u <= length else 2 * length - u)


@dataclass
class Sequence:
    seq_id: str
    frames: np.ndarray  # (T, H, W) float64 in [0, 1]
    annotation: SequenceAnnotation
    objects: list[MovingObject] = field(default_factory=list)


def render_sequence(
    objects: list[MovingObject],
    num_frames: int,
    height: int,
    width: int,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    class_id: int = CAR_CLASS,
) -> tuple[np.ndarray, SequenceAnnotation]:
    """Render uint8 frames and the visible-pixel annotation of each object."""
    rng = rng or np.random.default_rng(0)
    objects = sorted(objects, key=lambda o: o.track_id)
    frames = np.empty((num_frames, height, width), dtype=np.uint8)
    per_frame = []
    for t in range(num_frames):
        img = BACKGROUND_LEVEL + noise_sigma * rng.standard_normal((height, width))
        full = [o.raster(t, height, width) for o in objects]
        for o, m in zip(objects, full):
            img[m] = o.intensity + (noise_sigma * rng.standard_normal(int(m.sum())) if noise_sigma else 0.0)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        covered = np.zeros((height, width), dtype=bool)
        visible = {}
        for o, m in zip(reversed(objects), reversed(full)):
            visible[o.track_id] = m & ~covered
            covered |= m
        per_frame.append(visible)
    return frames, from_track_masks(per_frame, (height, width), class_id)


def _sample_objects(config: SynthConfig, rng: np.random.Generator) -> list[MovingObject]:
    objs = []
    for k in range(config.num_objects):
        shape = config.shapes[int(rng.integers(len(config.shapes)))]
        lo, hi = config.size_range
        if shape == "disk":
            r = int(rng.integers(lo, hi + 1)) // 2
            half = (r, r)
        else:
            half = (int(rng.integers(lo, hi + 1)) // 2, int(rng.integers(lo, hi + 1)) // 2)
        center = (
            float(rng.uniform(half[0], config.height - 1 - half[0])),
            float(rng.uniform(half[1], config.width - 1 - half[1])),
        )
        speed = float(rng.uniform(*config.speed_range))
        angle = float(rng.uniform(0.0, 2 * math.pi))
        objs.append(MovingObject(
            track_id=config.class_id * 1000 + k + 1,
            shape=shape,
            half_extent=half,
            center=center,
            velocity=(speed * math.sin(angle), speed * math.cos(angle)),
            intensity=float(rng.uniform(0.45, 1.0)),
        ))
    return objs


def _overlaps(objects: list[MovingObject], config: SynthConfig) -> bool:
    for t in range(config.frames_per_sequence):
        union = np.zeros((config.height, config.width), dtype=bool)
        for o in objects:
            m = o.raster(t, config.height, config.width)
            if np.any(union & m):
                return True
            union |= m
    return False


def generate_sequence(config: SynthConfig, index: int) -> Sequence:
    rng = np.random.default_rng(config.seed + index)
    for _ in range(1000):
        objects = _sample_objects(config, rng)
        if config.occlusion_allowed or not _overlaps(objects, config):
            break
    else:
        raise ConfigError("could not place non-overlapping objects; allow occlusion or shrink them")
    frames, ann = render_sequence(
        objects, config.frames_per_sequence, config.height, config.width,
        config.background_noise_sigma, rng, config.class_id,
    )
    return Sequence(f"{index:04d}", frames.astype(np.float64) / 255.0, ann, objects)


def write_pgm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def generate(config: SynthConfig, root: str | Path) -> list[str]:
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(config.num_sequences):
        seq = generate_sequence(config, i)
        frame_dir = root / seq.seq_id / "frames"
        frame_dir.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(np.round(seq.frames * 255).astype(np.uint8)):
            write_pgm(frame_dir / f"{t:06d}.pgm", img)
        write_sequence(seq.annotation, root / "instances_txt" / f"{seq.seq_id}.txt")
        ids.append(seq.seq_id)
    manifest = {"generator": "curricula_vos.synthgen", "config": asdict(config), "sequences": ids}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ids


def load_dataset(root: str | Path) -> list[Sequence]:
    root = Path(root)
    ann_dir = root / "instances_txt"
    if not ann_dir.is_dir():
        raise FileNotFoundError(f"{root}: missing instances_txt/ directory")
    out = []
    for ann_path in sorted(ann_dir.glob("*.txt")):
        seq_id = ann_path.stem
        frame_paths = sorted((root / seq_id / "frames").glob("*.pgm"))
        if not frame_paths:
            raise FileNotFoundError(f"{root / seq_id}: no frames")
        frames = np.stack([read_pgm(p) for p in frame_paths]).astype(np.float64) / 255.0
        ann = load_sequence(ann_path, num_frames=len(frames))
        if ann.frames and ann.image_size != frames.shape[1:]:
            raise ValueError(f"{seq_id}: annotation size {ann.image_size} != frame size {frames.shape[1:]}")
        ann.image_size = frames.shape[1:]
        out.append(Sequence(seq_id, frames, ann))
    if not out:
        raise FileNotFoundError(f"{root}: no sequences")
    return out
