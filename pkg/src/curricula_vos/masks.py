"""Binary instance masks: IoU, COCO compressed RLE and overlap resolution.

Masks are plain 2-D boolean numpy arrays indexed ``[row, col]``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class RLEError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def rle_counts(mask: np.ndarray) -> list[int]:
    """Alternating zero/one run lengths in column-major order, zero-run first."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        raise ValueError("empty mask")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def counts_to_mask(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    if sum(counts) != height * width:
        raise RLEError(f"counts sum to {sum(counts)}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def counts_to_string(counts: Sequence[int]) -> str:
    out = []
    for i, count in enumerate(counts):
        x = int(count)
        # Same delta rule as the COCO reference codec: only from index 3 on.
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if c & 0x10 else x != 0
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    n = len(s)
    while p < n:
        x = 0
        k = 0
        start = p
        more = True
        while more:
            if p >= n:
                raise RLEError("truncated count", start)
            c = ord(s[p]) - 48
            if not 0 <= c < 64:
                raise RLEError(f"invalid character {s[p]!r}", p)
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        if x < 0:
            raise RLEError(f"negative run length {x}", start)
        counts.append(x)
    return counts


def rle_encode(mask: np.ndarray) -> str:
    return counts_to_string(rle_counts(mask))


def rle_decode(rle_string: str, height: int, width: int) -> np.ndarray:
    if height <= 0 or width <= 0:
        raise RLEError(f"invalid mask size {height}x{width}")
    counts = string_to_counts(rle_string)
    total = 0
    for count in counts:
        total += count
        if total > height * width:
            raise RLEError(f"run lengths overflow {height}x{width} mask")
    return counts_to_mask(counts, height, width)


def resolve_overlaps(
    proposals: Sequence[tuple[int, np.ndarray]], threshold: float = 0.5
) -> dict[int, np.ndarray]:
    """Assign each pixel to the most confident proposal, if confident enough.

    Ties go to the lowest track id. Returns disjoint masks keyed by track id,
    one per proposal (possibly empty).
    """
    if not proposals:
        return {}
    ordered = sorted(proposals, key=lambda item: item[0])
    ids = [tid for tid, _ in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate track ids among proposals")
    conf = np.stack([np.asarray(c, dtype=np.float64) for _, c in ordered])
    # argmax returns the first maximum, i.e. the lowest track id on ties.
    winner = np.argmax(conf, axis=0)
    best = np.take_along_axis(conf, winner[None], axis=0)[0]
    keep = best >= threshold
    return {tid: keep & (winner == i) for i, tid in enumerate(ids)}
