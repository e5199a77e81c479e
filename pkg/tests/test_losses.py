"""Loss-term oracles and divergence properties."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partcat.autodiff import Tensor
from partcat.losses import (GroundTruth, LossError, LossWeights,
                            aggregate_to_object, bce, class_distributions,
                            compositional_loss, disentanglement_loss,
                            obj_part_loss, total_loss)
from partcat.model import ModelOutputs
from partcat.vocab import build_vocabulary


def _vocab():
    return build_vocabulary(
        ["cat's head", "cat's tail", "dog's head"], [True, True, False])


def _rand_dist(rng, n, k):
    x = rng.uniform(0.1, 1.0, size=(n, k))
    return x / x.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# bce

def test_bce_known_value():
    # p = 0.5 everywhere gives exactly log(2) regardless of targets
    t = np.array([[1.0, 0.0]])
    p = Tensor(np.full((1, 2), 0.5))
    np.testing.assert_allclose(bce(t, p).item(), np.log(2), atol=1e-12)


def test_bce_hand_computed():
    t = np.array([[1.0, 0.0]])
    p = Tensor(np.array([[0.8, 0.3]]))
    expect = -(np.log(0.8) + np.log(0.7)) / 2
    np.testing.assert_allclose(bce(t, p).item(), expect, atol=1e-12)


def test_bce_perfect_prediction_near_zero():
    t = np.array([[1.0, 0.0]])
    p = Tensor(np.array([[1.0, 0.0]]))
    assert bce(t, p).item() < 1e-5     # clamped at eps, not exactly zero


def test_bce_shape_mismatch():
    with pytest.raises(LossError):
        bce(np.zeros((2, 2)), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# per-class sums through model outputs

def _outputs_and_gt(seed=0):
    vocab = _vocab()
    rng = np.random.default_rng(seed)
    hw = 6
    mk = lambda n: Tensor(rng.uniform(0.05, 0.95, size=(hw, n)))
    cost = lambda n: Tensor(rng.uniform(-1, 1, size=(hw, n)))
    out = ModelOutputs(cost(vocab.n_objects), cost(vocab.n_parts),
                       cost(vocab.n_obj_parts), mk(vocab.n_objects),
                       mk(vocab.n_parts), mk(vocab.n_obj_parts))
    tgt = lambda n: (rng.uniform(size=(hw, n)) > 0.7).astype(float)
    gt = GroundTruth(tgt(vocab.n_objects), tgt(vocab.n_parts),
                     tgt(vocab.n_obj_parts))
    return vocab, out, gt


def test_disentanglement_is_weighted_sum_of_per_class_bces():
    vocab, out, gt = _outputs_and_gt()
    w = LossWeights(0.5, 2.0, 1.0)
    got = disentanglement_loss(out, gt, w).item()
    # oracle: sum over classes of per-class mean BCE
    def per_class_sum(target, prob):
        total = 0.0
        for c in range(target.shape[1]):
            total += bce(target[:, c:c + 1], prob[:, c:c + 1]).item()
        return total
    expect = 0.5 * per_class_sum(gt.masks_obj, out.pred_obj) \
        + 2.0 * per_class_sum(gt.masks_part, out.pred_part)
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_obj_part_loss_scales_linearly_in_class_count():
    vocab, out, gt = _outputs_and_gt()
    got = obj_part_loss(out, gt).item()
    expect = bce(gt.masks_obj_part, out.pred_obj_part).item() * vocab.n_obj_parts
    np.testing.assert_allclose(got, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# distributions

def test_softmax_distribution_rows_normalize():
    vocab, out, _ = _outputs_and_gt()
    p_obj, p_qp = class_distributions(out.cost_obj, out.cost_obj_part, "softmax")
    np.testing.assert_allclose(p_obj.numpy().sum(-1), 1.0, atol=1e-10)
    np.testing.assert_allclose(p_qp.numpy().sum(-1), 1.0, atol=1e-10)


def test_l1_distribution_arithmetic_example():
    # cosines (-0.5, 0.5) shift to (0.5, 1.5) -> (0.25, 0.75)
    cost = Tensor(np.array([[-0.5, 0.5]]))
    p, _ = class_distributions(cost, cost, "l1")
    np.testing.assert_allclose(p.numpy(), [[0.25, 0.75]], atol=1e-12)


def test_l1_distribution_degenerate_row():
    cost = Tensor(np.array([[-1.0, -1.0]]))
    with pytest.raises(LossError, match="degenerate"):
        class_distributions(cost, cost, "l1")


def test_unknown_mode():
    with pytest.raises(LossError):
        class_distributions(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), "l2")


def test_aggregate_to_object_mass_preservation():
    vocab = _vocab()
    rng = np.random.default_rng(3)
    p = _rand_dist(rng, 50, vocab.n_obj_parts)
    agg = aggregate_to_object(Tensor(p), vocab).numpy()
    np.testing.assert_allclose(agg.sum(-1), 1.0, atol=1e-9)
    # hand-check the mapping: cat <- {cat's head, cat's tail}, dog <- {dog's head}
    np.testing.assert_allclose(agg[:, 0], p[:, 0] + p[:, 1], atol=1e-12)
    np.testing.assert_allclose(agg[:, 1], p[:, 2], atol=1e-12)


# ---------------------------------------------------------------------------
# compositional loss

def test_compositional_non_negative_1000_pairs():
    rng = np.random.default_rng(4)
    for js in (False, True):
        vals = []
        for _ in range(500):
            p = Tensor(_rand_dist(rng, 1, 4))
            q = Tensor(_rand_dist(rng, 1, 4))
            vals.append(compositional_loss(p, q, js_midpoint=js).item())
        assert min(vals) >= 0.0


def test_compositional_zero_iff_equal():
    rng = np.random.default_rng(5)
    p = _rand_dist(rng, 20, 5)
    assert compositional_loss(Tensor(p), Tensor(p.copy())).item() <= 1e-9


def test_compositional_symmetric():
    rng = np.random.default_rng(6)
    p, q = Tensor(_rand_dist(rng, 10, 4)), Tensor(_rand_dist(rng, 10, 4))
    for js in (False, True):
        a = compositional_loss(p, q, js_midpoint=js).item()
        b = compositional_loss(q, p, js_midpoint=js).item()
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_compositional_rejects_unnormalized():
    with pytest.raises(LossError, match="normalized"):
        compositional_loss(Tensor(np.array([[0.5, 0.2]])),
                           Tensor(np.array([[0.5, 0.5]])))


def test_js_midpoint_bounded_by_log2():
    """True JS divergence is bounded by log 2 even for disjoint supports."""
    p = Tensor(np.array([[1.0 - 1e-9, 1e-9]]))
    q = Tensor(np.array([[1e-9, 1.0 - 1e-9]]))
    val = compositional_loss(p, q, js_midpoint=True).item()
    assert val <= np.log(2) + 1e-6
    # symmetrized KL explodes instead
    assert compositional_loss(p, q, js_midpoint=False).item() > val


@settings(deadline=None, max_examples=50)
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_compositional_nonneg_property(k, seed):
    rng = np.random.default_rng(seed)
    p, q = Tensor(_rand_dist(rng, 3, k)), Tensor(_rand_dist(rng, 3, k))
    assert compositional_loss(p, q).item() >= 0.0


# ---------------------------------------------------------------------------
# total loss composition

def test_total_loss_lambda_linearity():
    vocab, out, gt = _outputs_and_gt(7)
    base = total_loss(out, gt, vocab, LossWeights(1, 1, 0.0)).item()
    one = total_loss(out, gt, vocab, LossWeights(1, 1, 1.0)).item()
    three = total_loss(out, gt, vocab, LossWeights(1, 1, 3.0)).item()
    comp = one - base
    np.testing.assert_allclose(three - base, 3 * comp, rtol=1e-8)


def test_total_loss_off_equals_zero_lambda():
    vocab, out, gt = _outputs_and_gt(8)
    off = total_loss(out, gt, vocab, LossWeights(1, 1, 5.0), comp_mode="off").item()
    zero = total_loss(out, gt, vocab, LossWeights(1, 1, 0.0)).item()
    np.testing.assert_allclose(off, zero, rtol=1e-10)


def test_total_loss_single_volume_skips_missing_branches():
    vocab, out, gt = _outputs_and_gt(9)
    sv = ModelOutputs(None, None, out.cost_obj_part, None, None,
                      out.pred_obj_part)
    got = total_loss(sv, gt, vocab, LossWeights()).item()
    np.testing.assert_allclose(got, obj_part_loss(sv, gt).item(), atol=1e-12)


def test_loss_weights_reject_negative():
    with pytest.raises(LossError):
        LossWeights(-0.1, 1, 1)
