import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_sequence
from curricula_vos.annotations import load_sequence
from curricula_vos.mots_eval import (
    EmptyGroundTruthError, SequenceTallies, average_by_sequence, count_id_switches, evaluate, match_frame,
    metrics_from_tallies, pooled_metrics, sequence_metrics, sequence_tallies, write_csv,
)

IGNORE = 10000


# ------------------------------------------------------------ brute-force oracle

def _pixels(mask):
    return {(int(r), int(c)) for r, c in zip(*np.nonzero(mask))}


def oracle_metrics(gt_frames, pred_frames):
    """Straight from the definitions, on pixel sets, with no shortcuts."""
    tp = fp = fn = ids = gt_total = 0
    soft = 0.0
    last = {}
    for g, p in zip(gt_frames, pred_frames):
        ignore = _pixels(g[IGNORE]) if IGNORE in g else set()
        gts = {k: _pixels(v) for k, v in g.items() if k != IGNORE and np.any(v)}
        preds = {}
        for k, v in p.items():
            px = _pixels(v)
            if k == IGNORE or not px or len(px & ignore) > 0.5 * len(px):
                continue
            preds[k] = px
        pairs = [(a, b, len(gts[a] & preds[b]) / len(gts[a] | preds[b])) for a in gts for b in preds]
        matched = [x for x in pairs if x[2] > 0.5]
        assert len({a for a, _, _ in matched}) == len(matched) == len({b for _, b, _ in matched})
        for a, b, iou in matched:
            if a in last and last[a] != b:
                ids += 1
            last[a] = b
        tp += len(matched)
        soft += sum(x[2] for x in matched)
        fp += len(preds) - len(matched)
        fn += len(gts) - len(matched)
        gt_total += len(gts)
    return {
        "sMOTSA": 100 * (soft - fp - ids) / gt_total,
        "MOTSA": 100 * (tp - fp - ids) / gt_total,
        "MOTSP": 100 * soft / tp if tp else 0.0,
        "Recall": 100 * tp / gt_total,
        "Precision": 100 * tp / (tp + fp) if tp + fp else 0.0,
    }, (tp, fp, fn, ids, soft, gt_total)


def random_instance(rng):
    H, W = rng.integers(3, 9, size=2)
    T = int(rng.integers(1, 6))
    n = int(rng.integers(1, 4))
    gt_frames, pred_frames = [], []
    perm = rng.permutation(n) + 1
    for _ in range(T):
        labels = rng.integers(0, n + 1, size=(H, W))
        if rng.random() < 0.5:
            # coherent blobs instead of speckle
            labels = np.repeat(np.repeat(rng.integers(0, n + 1, size=(2, 2)), H, 0), W, 1)[:H, :W]
        g = {1000 + k: labels == k for k in range(1, n + 1)}
        if rng.random() < 0.4:
            r0, c0 = rng.integers(0, H), rng.integers(0, W)
            g[IGNORE] = np.zeros((H, W), bool)
            g[IGNORE][r0:r0 + 3, c0:c0 + 3] = labels[r0:r0 + 3, c0:c0 + 3] == 0
        noisy = np.where(rng.random((H, W)) < rng.uniform(0, 0.4), rng.integers(0, n + 2, size=(H, W)), labels)
        swap = rng.random() < 0.3
        p = {}
        for k in range(1, n + 2):
            pid = 1000 + (perm[k - 1] if swap and k <= n else k)
            p[pid] = noisy == k
        gt_frames.append(g)
        pred_frames.append(p)
    return (H, W), gt_frames, pred_frames


def has_gt(frames):
    return any(np.any(v) for f in frames for k, v in f.items() if k != IGNORE)


def test_oracle_equivalence_200_instances():
    rng = np.random.default_rng(20240601)
    checked = 0
    for _ in range(200):
        size, g, p = random_instance(rng)
        if not has_gt(g):
            continue
        gt = make_sequence(g, size)
        pred = make_sequence(p, size)
        got = sequence_metrics(gt, pred, class_id=1)
        want, (tp, fp, fn, ids, soft, total) = oracle_metrics(g, p)
        t = got.tallies
        assert (t.tp, t.fp, t.fn, t.ids, t.gt_total) == (tp, fp, fn, ids, total)
        assert t.soft_tp == pytest.approx(soft, abs=1e-12)
        for k, v in want.items():
            assert getattr(got, k) == pytest.approx(v, abs=1e-9)
        assert got.sMOTSA <= got.MOTSA + 1e-12 <= got.Recall + 2e-12
        checked += 1
    assert checked > 150


def test_hand_derived_two_frame_example(fixtures):
    gt = load_sequence(fixtures / "two_frame_gt.txt")
    pred = load_sequence(fixtures / "two_frame_pred.txt", num_frames=2)
    m = sequence_metrics(gt, pred, 1)
    assert (m.tallies.tp, m.tallies.fp, m.tallies.fn, m.tallies.ids, m.tallies.gt_total) == (1, 0, 1, 0, 2)
    assert m.tallies.soft_tp == pytest.approx(0.6)
    assert m.sMOTSA == pytest.approx(30.0)
    assert m.MOTSP == pytest.approx(60.0)
    assert m.Recall == pytest.approx(50.0)
    assert m.Precision == pytest.approx(100.0)


def test_perfect_prediction(fixtures):
    gt = load_sequence(fixtures / "kitti_0002.txt")
    for cls in (1, 2, None):
        m = sequence_metrics(gt, gt, cls)
        assert m.as_dict() == {k: 100.0 for k in m.as_dict()}
        assert (m.tallies.fp, m.tallies.fn, m.tallies.ids) == (0, 0, 0)


def test_prediction_inside_ignore_region_not_counted(fixtures):
    gt = load_sequence(fixtures / "kitti_0002.txt")
    pred = load_sequence(fixtures / "kitti_0002_pred_ignored_fp.txt")
    assert sequence_metrics(gt, pred, 1).tallies.fp == 0


def test_prediction_half_in_ignore_region_still_counts():
    ign = np.zeros((2, 4), bool)
    ign[0, :2] = True
    p = np.zeros((2, 4), bool)
    p[0, 1:3] = True  # exactly half inside: not removed
    g = np.zeros((2, 4), bool)
    g[1, 3] = True
    t = sequence_tallies(make_sequence([{1001: g, IGNORE: ign}], (2, 4)), make_sequence([{1002: p}], (2, 4)), 1)
    assert t.fp == 1


def test_iou_exactly_half_is_not_a_match():
    g = np.zeros((1, 4), bool)
    g[0, :3] = True
    p = np.zeros((1, 4), bool)
    p[0, 1:4] = True  # overlap 2, union 4
    gt, pred = make_sequence([{1001: g}], (1, 4)), make_sequence([{1001: p}], (1, 4))
    assert match_frame(gt.frame(0), pred.frame(0)) == []
    p2 = np.zeros((1, 4), bool)
    p2[0, :2] = True  # 2 / 3
    assert len(match_frame(gt.frame(0), make_sequence([{1001: p2}], (1, 4)).frame(0))) == 1


def test_empty_prediction_frame():
    g = {1001: np.eye(3, dtype=bool), 1002: np.fliplr(np.eye(3, dtype=bool)) & ~np.eye(3, dtype=bool)}
    gt = make_sequence([g], (3, 3))
    t = sequence_tallies(gt, make_sequence([{}], (3, 3)))
    assert (t.tp, t.fn, t.fp) == (0, 2, 0)


def test_id_switch_examples():
    assert count_id_switches([[(1, 7, 1.0)]] * 5) == 0
    assert count_id_switches([[(1, 1, 1.0)], [], [(1, 2, 1.0)]]) == 1
    assert count_id_switches([[(1, 1, 1.0), (2, 2, 1.0)], [(1, 2, 1.0), (2, 1, 1.0)]]) == 2


def test_negative_smotsa_from_false_positives():
    m = metrics_from_tallies(SequenceTallies(tp=0, fp=3, fn=2, ids=0, soft_tp=0.0, gt_total=2))
    assert m.sMOTSA == pytest.approx(-150.0)
    assert m.MOTSP == 0.0 and "MOTSP" in m.undefined


def test_zero_denominator_conventions():
    m = metrics_from_tallies(SequenceTallies(fn=3, gt_total=3))
    assert m.Precision == 0.0 and m.MOTSP == 0.0
    assert set(m.undefined) == {"MOTSP", "Precision"}
    with pytest.raises(EmptyGroundTruthError):
        metrics_from_tallies(SequenceTallies())


def test_average_by_sequence():
    a = metrics_from_tallies(SequenceTallies(tp=1, fn=1, soft_tp=0.6, gt_total=2))
    b = metrics_from_tallies(SequenceTallies(fp=3, fn=2, gt_total=2))
    assert average_by_sequence({"a": a})["sMOTSA"] == pytest.approx(30.0)
    assert average_by_sequence({"a": a, "b": b})["sMOTSA"] == pytest.approx(-60.0)
    with pytest.raises(ValueError):
        average_by_sequence({})


def test_average_and_pooled_against_oracle():
    rng = np.random.default_rng(3)
    gts, preds, oracle = {}, {}, []
    while len(gts) < 5:
        size, g, p = random_instance(rng)
        if not has_gt(g):
            continue
        sid = f"s{len(gts)}"
        gts[sid], preds[sid] = make_sequence(g, size), make_sequence(p, size)
        oracle.append(oracle_metrics(g, p))
    report = evaluate(gts, preds, 1, threads=3)
    for name in report.averaged:
        assert report.averaged[name] == pytest.approx(np.mean([o[0][name] for o in oracle]), abs=1e-9)
    tp, fp, fn, ids, soft, total = (sum(o[1][i] for o in oracle) for i in range(6))
    pooled = pooled_metrics(report.per_sequence)
    assert pooled["sMOTSA"] == pytest.approx(100 * (soft - fp - ids) / total, abs=1e-9)
    assert pooled["Recall"] == pytest.approx(100 * tp / total, abs=1e-9)


@given(st.integers(0, 2**31))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    size, g, p = random_instance(rng)
    if not has_gt(g):
        return
    gt = make_sequence(g, size)
    relabel = {k: 5000 - k for f in p for k in f}
    q = [{relabel[k]: v for k, v in f.items()} for f in p]
    a = sequence_metrics(gt, make_sequence(p, size), 1)
    b = sequence_metrics(gt, make_sequence(q, size), 1)
    assert a.as_dict() == pytest.approx(b.as_dict())
    assert a.tallies.ids == b.tallies.ids


def test_evaluate_skips_sequences_without_gt(caplog):
    g = np.zeros((2, 2), bool)
    g[0, 0] = True
    gts = {"a": make_sequence([{1001: g}], (2, 2)), "b": make_sequence([{}], (2, 2))}
    report = evaluate(gts, {}, 1)
    assert report.skipped == ["b"] and list(report.per_sequence) == ["a"]
    assert "no ground truth" in caplog.text
    with pytest.raises(EmptyGroundTruthError):
        evaluate({"b": gts["b"]}, {}, 1)


def test_threads_do_not_change_results(monkeypatch):
    rng = np.random.default_rng(11)
    gts, preds = {}, {}
    while len(gts) < 6:
        size, g, p = random_instance(rng)
        if has_gt(g):
            gts[str(len(gts))], preds[str(len(preds))] = make_sequence(g, size), make_sequence(p, size)
    one = evaluate(gts, preds, 1, threads=1)
    monkeypatch.setenv("CURRICULA_VOS_THREADS", "4")
    many = evaluate(gts, preds, 1)
    assert one.averaged == many.averaged


def test_write_csv(tmp_path, fixtures):
    gt = load_sequence(fixtures / "two_frame_gt.txt")
    pred = load_sequence(fixtures / "two_frame_pred.txt", num_frames=2)
    report = evaluate({"seq": gt}, {"seq": pred}, 1)
    write_csv(report, tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["sequence_id"] for r in rows] == ["seq", "AVERAGE"]
    assert float(rows[0]["sMOTSA"]) == pytest.approx(30.0)
    assert float(rows[1]["soft_tp"]) == pytest.approx(0.6)
