"""Protocol decoding, metrics, and P5 graymap I/O."""

import numpy as np
import pytest

from partcat.evaluation import (BACKGROUND, ConfusionAccumulator, EvalError,
                                LabelMap, harmonic_mean, iou_per_class,
                                mean_iou, predict_oracle_obj, predict_pred_all,
                                read_pgm, recall_per_class,
                                report_from_confusion, write_pgm)
from partcat.vocab import build_vocabulary


def _vocab():
    return build_vocabulary(
        ["cat's head", "cat's tail", "dog's head"], [True, True, False])


# ---------------------------------------------------------------------------
# harmonic mean against published table values

@pytest.mark.parametrize("a,b,expect", [
    (52.62, 40.51, 45.77),
    (57.49, 44.88, 50.41),
    (57.33, 53.07, 55.12),
    (67.15, 61.02, 63.94),
])
def test_harmonic_mean_reference_values(a, b, expect):
    assert abs(harmonic_mean(a, b) - expect) <= 0.05


def test_harmonic_mean_rejects_nonpositive():
    with pytest.raises(EvalError):
        harmonic_mean(0.0, 1.0)


# ---------------------------------------------------------------------------
# protocol decoding oracles

def test_predict_pred_all_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, w, k = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)
        prob = rng.uniform(size=(h * w, k))
        tau = float(rng.uniform(0.2, 0.8))
        got = predict_pred_all(prob, tau, h, w).flat()
        for i in range(h * w):
            best = int(np.argmax(prob[i]))
            expect = best if prob[i, best] > tau else BACKGROUND
            assert got[i] == expect


def test_predict_pred_all_tau_bounds():
    with pytest.raises(EvalError):
        predict_pred_all(np.ones((1, 2)), 1.0, 1, 1)
    with pytest.raises(EvalError):
        predict_pred_all(np.ones((1, 2)), 0.0, 1, 1)


def test_predict_oracle_obj_matches_loop_oracle():
    vocab = _vocab()
    rng = np.random.default_rng(1)
    for _ in range(20):
        h, w = rng.integers(1, 9), rng.integers(1, 9)
        prob = rng.uniform(size=(h * w, vocab.n_obj_parts))
        gt_obj = LabelMap(h, w, rng.integers(-1, vocab.n_objects,
                                             size=(h, w)))
        got = predict_oracle_obj(prob, gt_obj, vocab).flat()
        for i, o in enumerate(gt_obj.flat()):
            if o == BACKGROUND:
                assert got[i] == BACKGROUND
            else:
                parts = vocab.parts_of_object(int(o))
                assert got[i] == parts[int(np.argmax(prob[i, parts]))]


def test_oracle_obj_restriction_property():
    """Predicted label always belongs to the GT object; background stays."""
    vocab = _vocab()
    rng = np.random.default_rng(2)
    prob = rng.uniform(size=(36, vocab.n_obj_parts))
    gt_obj = LabelMap(6, 6, rng.integers(-1, 2, size=(6, 6)))
    pred = predict_oracle_obj(prob, gt_obj, vocab)
    for label, obj in zip(pred.flat(), gt_obj.flat()):
        if obj == BACKGROUND:
            assert label == BACKGROUND
        else:
            assert vocab.object_of(int(label)) == obj


def test_oracle_obj_shape_mismatch():
    vocab = _vocab()
    with pytest.raises(EvalError):
        predict_oracle_obj(np.ones((4, 3)), LabelMap(3, 3, np.zeros((3, 3))),
                           vocab)


# ---------------------------------------------------------------------------
# confusion table and metrics

def test_iou_hand_example():
    gt = LabelMap(2, 2, np.array([[0, 0], [1, -1]]))
    pred = LabelMap(2, 2, np.array([[0, 1], [1, -1]]))
    iou = iou_per_class(pred, gt, 2)
    np.testing.assert_allclose(iou[0], 0.5)      # inter 1, union 2
    np.testing.assert_allclose(iou[1], 0.5)      # inter 1, union 2
    rec = recall_per_class(pred, gt, 2)
    np.testing.assert_allclose(rec[0], 0.5)
    np.testing.assert_allclose(rec[1], 1.0)


def test_confusion_matches_per_pixel_oracle():
    rng = np.random.default_rng(3)
    n = 4
    acc = ConfusionAccumulator(n)
    gt = LabelMap(5, 5, rng.integers(-1, n, size=(5, 5)))
    pred = LabelMap(5, 5, rng.integers(-1, n, size=(5, 5)))
    acc.add(pred, gt)
    oracle = np.zeros((n + 1, n + 1), dtype=np.int64)
    for g, p in zip(gt.flat(), pred.flat()):
        oracle[g if g != BACKGROUND else n, p if p != BACKGROUND else n] += 1
    np.testing.assert_array_equal(acc.table, oracle)


def test_confusion_accumulation_order_invariant():
    rng = np.random.default_rng(4)
    maps = [(LabelMap(3, 3, rng.integers(-1, 3, size=(3, 3))),
             LabelMap(3, 3, rng.integers(-1, 3, size=(3, 3))))
            for _ in range(6)]
    a, b = ConfusionAccumulator(3), ConfusionAccumulator(3)
    for p, g in maps:
        a.add(p, g)
    for p, g in reversed(maps):
        b.add(p, g)
    np.testing.assert_array_equal(a.table, b.table)


def test_confusion_merge_equals_joint():
    rng = np.random.default_rng(5)
    p1 = LabelMap(4, 4, rng.integers(-1, 2, size=(4, 4)))
    g1 = LabelMap(4, 4, rng.integers(-1, 2, size=(4, 4)))
    p2 = LabelMap(4, 4, rng.integers(-1, 2, size=(4, 4)))
    g2 = LabelMap(4, 4, rng.integers(-1, 2, size=(4, 4)))
    joint = ConfusionAccumulator(2)
    joint.add(p1, g1)
    joint.add(p2, g2)
    a, b = ConfusionAccumulator(2), ConfusionAccumulator(2)
    a.add(p1, g1)
    b.add(p2, g2)
    a.merge(b)
    np.testing.assert_array_equal(a.table, joint.table)


def test_absent_classes_omitted_from_miou():
    gt = LabelMap(1, 2, np.array([[0, 0]]))
    pred = LabelMap(1, 2, np.array([[0, 0]]))
    iou = iou_per_class(pred, gt, 3)
    assert set(iou) == {0}
    with pytest.raises(EvalError):
        mean_iou(iou, [1, 2])        # subset with no defined classes


def test_report_from_confusion_zero_branch_gives_zero_h():
    vocab = _vocab()
    acc = ConfusionAccumulator(vocab.n_obj_parts)
    gt = LabelMap(2, 2, np.array([[0, 1], [2, 2]]))
    pred = LabelMap(2, 2, np.array([[0, 1], [0, 1]]))   # novel class 2 missed
    acc.add(pred, gt)
    rep = report_from_confusion(acc, vocab, "pred-all")
    assert rep.miou_unseen == 0.0
    assert rep.h_iou == 0.0
    assert rep.miou_seen > 0


def test_report_kv_and_table_render(tmp_path):
    vocab = _vocab()
    acc = ConfusionAccumulator(vocab.n_obj_parts)
    acc.add(LabelMap(2, 2, np.array([[0, 1], [2, -1]])),
            LabelMap(2, 2, np.array([[0, 1], [2, -1]])))
    rep = report_from_confusion(acc, vocab, "oracle-obj")
    kv = rep.to_kv(vocab)
    assert "h_iou=1.000000" in kv
    assert "iou[cat's head]=1.000000" in kv
    assert "[oracle-obj]" in rep.format_table(vocab)


# ---------------------------------------------------------------------------
# PGM I/O

def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    lm = LabelMap(7, 5, rng.integers(-1, 20, size=(7, 5)))
    path = tmp_path / "m.pgm"
    write_pgm(path, lm)
    back = read_pgm(path)
    assert (back.h, back.w) == (7, 5)
    np.testing.assert_array_equal(back.labels, lm.labels)


def test_pgm_rewrite_byte_identical(tmp_path):
    lm = LabelMap(3, 3, np.arange(9).reshape(3, 3) - 1)
    p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
    write_pgm(p1, lm)
    write_pgm(p2, read_pgm(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_pgm_payload_with_whitespace_bytes(tmp_path):
    """Pixel values that collide with ASCII whitespace survive the header
    tokenizer (values 9, 10, 13, 32)."""
    lm = LabelMap(2, 2, np.array([[9, 10], [13, 32]]))
    path = tmp_path / "ws.pgm"
    write_pgm(path, lm)
    np.testing.assert_array_equal(read_pgm(path).labels, lm.labels)


def test_pgm_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n2 2\n255\n")
    with pytest.raises(EvalError, match="P5"):
        read_pgm(path)


def test_pgm_rejects_truncated(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(EvalError, match="truncated"):
        read_pgm(path)


def test_pgm_rejects_too_many_classes(tmp_path):
    with pytest.raises(EvalError):
        write_pgm(tmp_path / "x.pgm", LabelMap(1, 1, np.array([[255]])))


def test_label_map_shape_check():
    with pytest.raises(EvalError):
        LabelMap(2, 3, np.zeros((3, 2)))
