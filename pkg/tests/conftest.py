from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from curricula_vos.annotations import Entry, SequenceAnnotation

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def make_sequence(frames, image_size, class_id=1):
    """``frames``: list of ``{track_id: mask}``; track id 10000 becomes an ignore entry."""
    seq = SequenceAnnotation(tuple(image_size), num_frames=len(frames))
    for t, masks in enumerate(frames):
        for tid in sorted(masks):
            cls = 10 if tid == 10000 else class_id
            seq.add(t, Entry(tid, cls, np.asarray(masks[tid], dtype=bool)))
    return seq
