import numpy as np
import pytest

from curricula_vos.annotations import (
    IGNORE_TRACK_ID, AnnotationFormatError, Entry, FrameAnnotation, SequenceAnnotation, format_sequence,
    from_track_masks, load_sequence, load_sequences, parse_line, parse_text, write_sequence,
)
from curricula_vos.masks import rle_encode


def test_parse_kitti_fixture(fixtures):
    seq = load_sequence(fixtures / "kitti_0002.txt")
    assert seq.image_size == (375, 1242)
    assert seq.length == 3
    assert seq.track_ids() == [1002, 1005, 2001]
    f0 = seq.frame(0)
    assert [e.track_id for e in f0.objects(1)] == [1002, 1005]
    assert [e.track_id for e in f0.objects(2)] == [2001]
    ignore = f0.ignore_mask()
    assert ignore.any()
    assert all(not (ignore & e.mask).any() for e in f0.objects())
    f0.validate()


def test_fixture_roundtrips_byte_exact(fixtures, tmp_path):
    text = (fixtures / "kitti_0002.txt").read_text()
    seq = parse_text(text)
    assert format_sequence(seq) == text
    write_sequence(seq, tmp_path / "x.txt")
    assert (tmp_path / "x.txt").read_text() == text


def test_parse_line_fields():
    m = np.zeros((3, 4), bool)
    m[1, 2] = True
    frame, e = parse_line(f"7 1003 1 3 4 {rle_encode(m)}")
    assert frame == 7 and e.track_id == 1003 and e.class_id == 1
    np.testing.assert_array_equal(e.mask, m)


@pytest.mark.parametrize("line, fragment", [
    ("0 1001 1 3 4", "6 fields"),
    ("0 1001 x 3 4 <", "non-integer"),
    ("-1 1001 1 3 4 <", "negative frame"),
    ("0 1001 1 3 4 !!", "bad RLE"),
    ("0 1001 1 3 4 9", "bad RLE"),
])
def test_malformed_lines(line, fragment):
    with pytest.raises(AnnotationFormatError, match=fragment):
        parse_line(line, "seq.txt", 12)


def test_error_carries_line_number():
    m = rle_encode(np.zeros((2, 2), bool))
    text = f"0 1001 1 2 2 {m}\n\n0 1002 1 2 2 ??\n"
    with pytest.raises(AnnotationFormatError) as err:
        parse_text(text, "s.txt")
    assert err.value.lineno == 3
    assert "s.txt:3" in str(err.value)


def test_inconsistent_image_size():
    a = rle_encode(np.zeros((2, 2), bool))
    b = rle_encode(np.zeros((2, 3), bool))
    with pytest.raises(AnnotationFormatError, match="image size"):
        parse_text(f"0 1001 1 2 2 {a}\n1 1001 1 2 3 {b}\n")


def test_duplicate_track_in_frame():
    a = rle_encode(np.zeros((2, 2), bool))
    with pytest.raises(AnnotationFormatError, match="duplicate"):
        parse_text(f"0 1001 1 2 2 {a}\n0 1001 1 2 2 {a}\n")


def test_empty_text():
    seq = parse_text("", num_frames=4)
    assert seq.length == 4 and not seq.frames


def test_missing_frames_are_empty():
    seq = SequenceAnnotation((2, 2), num_frames=3)
    assert seq.frame(2).entries == []


def test_validate_rejects_overlap():
    m = np.ones((2, 2), bool)
    f = FrameAnnotation(0, (2, 2), [Entry(1001, 1, m), Entry(1002, 1, m)])
    with pytest.raises(ValueError, match="overlap"):
        f.validate()
    ok = FrameAnnotation(0, (2, 2), [Entry(1001, 1, m), Entry(IGNORE_TRACK_ID, 10, m)])
    ok.validate()


def test_from_track_masks_drops_empty():
    a = np.zeros((2, 2), bool)
    b = a.copy()
    b[0, 0] = True
    seq = from_track_masks([{1001: b, 1002: a}, {1001: a}], (2, 2))
    assert seq.length == 2
    assert [e.track_id for e in seq.frame(0).entries] == [1001]
    assert seq.frame(1).entries == []


def test_load_sequences_directory(fixtures, tmp_path):
    for name in ("b", "a"):
        (tmp_path / f"{name}.txt").write_text((fixtures / "two_frame_gt.txt").read_text())
    seqs = load_sequences(tmp_path)
    assert list(seqs) == ["a", "b"]
    assert seqs["a"] == seqs["b"]
