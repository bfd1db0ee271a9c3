import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curricula_vos.masks import (
    RLEError, counts_to_mask, counts_to_string, mask_iou, resolve_overlaps, rle_counts, rle_decode,
    rle_encode, string_to_counts,
)

masks = st.tuples(st.integers(1, 24), st.integers(1, 24)).flatmap(
    lambda hw: arrays(np.bool_, hw)
)


def load_fixtures(fixtures):
    data = json.loads((fixtures / "rle_coco.json").read_text())
    for case in data["cases"]:
        m = np.array([[ch == "1" for ch in row] for row in case["rows"]], dtype=bool)
        yield case, m


def test_fixture_set_size(fixtures):
    assert len(list(load_fixtures(fixtures))) >= 20


def test_encode_matches_reference_codec(fixtures):
    for case, m in load_fixtures(fixtures):
        assert rle_encode(m) == case["counts"], case["name"]


def test_decode_matches_reference_codec(fixtures):
    for case, m in load_fixtures(fixtures):
        out = rle_decode(case["counts"], case["height"], case["width"])
        np.testing.assert_array_equal(out, m, err_msg=case["name"])


def test_fixed_mask_counts():
    m = np.array([[0, 0, 1, 1, 0], [0, 1, 1, 1, 0], [0, 1, 1, 0, 0], [0, 0, 0, 0, 0]], dtype=bool)
    assert rle_counts(m) == [5, 2, 1, 3, 1, 2, 6]


def test_counts_start_with_zero_run():
    assert rle_counts(np.ones((2, 2), bool)) == [0, 4]
    assert rle_counts(np.zeros((2, 2), bool)) == [4]


def test_column_major_order():
    m = np.array([[1, 0], [0, 0]], dtype=bool)
    assert rle_counts(m) == [0, 1, 3]
    m = np.array([[0, 1], [0, 0]], dtype=bool)
    assert rle_counts(m) == [2, 1, 1]


@given(masks)
def test_roundtrip(m):
    s = rle_encode(m)
    assert all(48 <= ord(c) < 48 + 64 for c in s)
    np.testing.assert_array_equal(rle_decode(s, *m.shape), m)


@given(st.lists(st.integers(0, 5000), min_size=1, max_size=30))
def test_counts_string_roundtrip(counts):
    assert string_to_counts(counts_to_string(counts)) == counts


def test_large_random_masks_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(300):
        h, w = rng.integers(1, 65, size=2)
        m = rng.random((h, w)) < rng.random()
        np.testing.assert_array_equal(rle_decode(rle_encode(m), h, w), m)


def test_counts_to_mask_rejects_wrong_total():
    with pytest.raises(RLEError):
        counts_to_mask([3, 2], 2, 2)


def test_decode_rejects_overflow():
    s = counts_to_string([3, 5])
    with pytest.raises(RLEError):
        rle_decode(s, 2, 2)


def test_decode_rejects_bad_character_with_offset():
    with pytest.raises(RLEError) as err:
        rle_decode("52 1", 4, 5)
    assert err.value.offset == 2


def test_decode_rejects_truncated_string():
    # 'a' = 49 + 48 has the continuation bit set and nothing follows
    with pytest.raises(RLEError, match="truncated"):
        string_to_counts("0a")


def test_decode_rejects_negative_run():
    # a negative delta larger than the run two places back
    bad = counts_to_string([1, 1, 1]) + counts_to_string([0, 0, 0, -5])[3:]
    with pytest.raises(RLEError, match="negative"):
        string_to_counts(bad)


def test_iou_basic():
    a = np.zeros((2, 3), bool)
    b = np.zeros((2, 3), bool)
    a[0, :3] = True
    b[0, 1:3] = True
    b[1, 0] = True
    assert mask_iou(a, b) == pytest.approx(2 / 4)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 0.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


@given(masks, st.data())
def test_iou_symmetric_and_bounded(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    v = mask_iou(a, b)
    assert v == mask_iou(b, a)
    assert 0.0 <= v <= 1.0


def test_resolve_overlaps_argmax_and_threshold():
    p1 = np.array([[0.9, 0.6, 0.2]])
    p2 = np.array([[0.8, 0.7, 0.4]])
    out = resolve_overlaps([(2, p2), (1, p1)], threshold=0.5)
    np.testing.assert_array_equal(out[1], [[True, False, False]])
    np.testing.assert_array_equal(out[2], [[False, True, False]])


def test_resolve_overlaps_tie_goes_to_lowest_id():
    p = np.array([[0.7]])
    out = resolve_overlaps([(5, p), (3, p.copy())])
    assert out[3][0, 0] and not out[5][0, 0]


def test_resolve_overlaps_empty_and_duplicates():
    assert resolve_overlaps([]) == {}
    with pytest.raises(ValueError):
        resolve_overlaps([(1, np.zeros((1, 1))), (1, np.zeros((1, 1)))])


@given(st.integers(1, 4), st.integers(0, 2**31))
def test_resolve_overlaps_disjoint(n, seed):
    rng = np.random.default_rng(seed)
    props = [(i + 1, rng.random((6, 7))) for i in range(n)]
    out = resolve_overlaps(props)
    stack = np.stack([out[i + 1] for i in range(n)])
    assert stack.sum(axis=0).max() <= 1
    confident = np.max([p for _, p in props], axis=0) >= 0.5
    np.testing.assert_array_equal(stack.any(axis=0), confident)
