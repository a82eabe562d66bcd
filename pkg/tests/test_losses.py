"""Loss values, gradients, and straight-line recomputation agreement."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle_losses import (
    cross_entropy_value,
    exbl_triplet_value,
    l2_value,
    mask_explanation_value,
    rrr_value,
)
from xbl.autodiff import (
    Graph,
    Tensor,
    backward,
    constant,
    finite_diff_check,
    op_forward,
    parameter,
)
from xbl.data import LabeledImage
from xbl.errors import ContractError, DimensionError, GraphError
from xbl.losses import (
    ExemplarPair,
    LossWeights,
    cross_entropy,
    exbl_triplet_loss,
    l2_penalty,
    mask_explanation_loss,
    rrr_loss,
    total_loss,
    triplet_hinge,
)
from xbl.model import ModelConfig, build_classifier

TWO_BLOCK = ModelConfig(image_size=12, conv_channels=(3, 5), hidden_width=10,
                        seed=2, dtype="float64")
ONE_BLOCK = ModelConfig(image_size=8, conv_channels=(4,), hidden_width=6,
                        seed=5, dtype="float64")


def _weights(model):
    return {name: t.data for name, t in model.named_params()}


def _batch(rng, n, size):
    return [LabeledImage(pixels=rng.random((size, size)), label=int(rng.integers(0, 4)))
            for _ in range(n)]


# ---------------------------------------------------------------------------
# cross-entropy


def test_ce_perfect_prediction_is_zero():
    probs = constant(np.array([[1.0, 0.0, 0.0, 0.0]]))
    with Graph(mode="eval"):
        pass
    with Graph(mode="eval"):
        loss = cross_entropy(constant(np.array([[1.0, 0.0, 0.0, 0.0]])), [0])
    assert float(loss.data) == 0.0


def test_ce_uniform_is_log_k():
    with Graph(mode="eval"):
        loss = cross_entropy(constant(np.full((1, 4), 0.25)), [2])
    np.testing.assert_allclose(float(loss.data), np.log(4.0), rtol=1e-6)


def test_ce_frozen_two_instance_batch():
    probs = np.array([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]])
    with Graph(mode="eval"):
        loss = cross_entropy(constant(probs), [0, 3])
    np.testing.assert_allclose(float(loss.data), (np.log(2) + np.log(4)) / 2, rtol=1e-6)


def test_ce_label_out_of_range():
    with Graph(mode="eval"):
        with pytest.raises(IndexError):
            cross_entropy(constant(np.full((1, 4), 0.25)), [4])


def test_ce_requires_normalized_rows():
    with Graph(mode="eval"):
        with pytest.raises(ContractError, match="sum to 1"):
            cross_entropy(constant(np.array([[0.5, 0.1, 0.1, 0.1]])), [0])


def test_ce_matches_straight_value_and_gradient():
    rng = np.random.default_rng(0)
    logits_raw = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    with Graph(mode="eval") as g:
        z = parameter(logits_raw, name="z")
        probs = op_forward("softmax", (z,))
        loss = cross_entropy(probs, labels)
        backward(g, loss)
        err = finite_diff_check(g, loss, z)
    oracle = cross_entropy_value(
        np.exp(logits_raw - logits_raw.max(1, keepdims=True))
        / np.exp(logits_raw - logits_raw.max(1, keepdims=True)).sum(1, keepdims=True),
        labels)
    np.testing.assert_allclose(float(loss.data), oracle, rtol=1e-10)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# l2 penalty


def test_l2_frozen_values():
    with Graph(mode="eval"):
        single = l2_penalty([parameter(np.array([3.0]), name="a")], 1.0)
        pair = l2_penalty([parameter(np.array([1.0, 2.0]), name="b"),
                           parameter(np.array([2.0]), name="c")], 0.5)
        zero = l2_penalty([parameter(np.array([5.0]), name="d")], 0.0)
    assert float(single.data) == 9.0
    assert float(pair.data) == 4.5
    assert float(zero.data) == 0.0


def test_l2_empty_parameter_list():
    with Graph(mode="eval"):
        assert float(l2_penalty([], 0.5).data) == 0.0


def test_l2_gradient_is_two_lambda_theta():
    theta = np.array([1.0, -2.0, 0.5])
    with Graph(mode="eval") as g:
        p = parameter(theta, name="p")
        loss = l2_penalty([p], 0.25)
        backward(g, loss)
    np.testing.assert_allclose(p.grad, 2 * 0.25 * theta, rtol=1e-12)


def test_l2_matches_straight_value():
    rng = np.random.default_rng(1)
    arrays = [rng.normal(size=(3, 2)), rng.normal(size=(4,))]
    with Graph(mode="eval"):
        loss = l2_penalty([parameter(a, name=f"p{i}") for i, a in enumerate(arrays)], 0.3)
    np.testing.assert_allclose(float(loss.data), l2_value(arrays, 0.3), rtol=1e-10)


# ---------------------------------------------------------------------------
# mask explanation loss


def test_mask_loss_frozen_values():
    with Graph(mode="eval"):
        zero = mask_explanation_loss([np.zeros((2, 2))], [np.ones((2, 2))])
        ones = mask_explanation_loss([np.ones((2, 2))], [np.ones((2, 2))])
        hand = mask_explanation_loss(
            [np.array([[1.0, 0.0], [0.0, 0.0]])],
            [np.array([[0.7, 0.9], [0.1, 0.0]])])
    assert float(zero.data) == 0.0
    assert float(ones.data) == 4.0
    np.testing.assert_allclose(float(hand.data), 0.7, rtol=1e-6)


def test_mask_loss_batch_order_invariant():
    rng = np.random.default_rng(2)
    masks = [rng.integers(0, 2, (3, 3)).astype(float) for _ in range(4)]
    exps = [rng.random((3, 3)) for _ in range(4)]
    with Graph(mode="eval"):
        fwd = float(mask_explanation_loss(masks, exps).data)
        rev = float(mask_explanation_loss(masks[::-1], exps[::-1]).data)
    np.testing.assert_allclose(fwd, rev, rtol=1e-6)
    np.testing.assert_allclose(fwd, mask_explanation_value(masks, exps), rtol=1e-10)


def test_mask_loss_shape_mismatch():
    with Graph(mode="eval"):
        with pytest.raises(DimensionError):
            mask_explanation_loss([np.ones((2, 2))], [np.ones((3, 3))])
        with pytest.raises(DimensionError):
            mask_explanation_loss([np.ones((2, 2))], [np.ones((2, 2)), np.ones((2, 2))])


def test_mask_loss_keeps_tensor_gradient_path():
    with Graph(mode="eval") as g:
        p = parameter(np.array([[[[0.5, 0.25], [0.1, 0.9]]]]), name="p")
        loss = mask_explanation_loss([np.array([[1.0, 0.0], [0.0, 1.0]])], [p])
        backward(g, loss)
    np.testing.assert_allclose(float(loss.data), 1.4, rtol=1e-6)
    np.testing.assert_array_equal(p.grad[0, 0], [[1.0, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# triplet hinge on fixed products


def _hinge(products, good, bad, margin):
    pair = ExemplarPair.from_arrays(good, bad)
    with Graph(mode="eval"):
        prods = constant(np.asarray(products, dtype=np.float32)[:, None])
        loss = triplet_hinge(prods, pair, margin)
    return float(loss.data)


def test_triplet_satisfied_instance_contributes_zero():
    good = np.array([[3.0, 0.0], [0.0, 0.0]])
    bad = np.zeros((2, 2))
    assert _hinge([good], good, bad, 1.0) == 0.0


def test_triplet_tie_returns_exactly_margin():
    good = np.array([[1.0, 0.0], [0.0, 0.0]])
    bad = np.array([[0.0, 1.0], [0.0, 0.0]])
    for margin in (1.0, 0.25):
        assert _hinge([np.zeros((2, 2))], good, bad, margin) == margin


def test_triplet_frozen_hand_case():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    good = np.array([[1.0, 1.0], [0.0, 0.0]])
    bad = np.zeros((2, 2))
    assert _hinge([p], good, bad, 1.0) == 1.0


def test_triplet_rejects_negative_margin_and_bad_shapes():
    pair = ExemplarPair.from_arrays(np.zeros((2, 2)), np.ones((2, 2)))
    with Graph(mode="eval"):
        prods = constant(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ContractError):
            triplet_hinge(prods, pair, -0.5)
        with pytest.raises(DimensionError):
            triplet_hinge(constant(np.zeros((1, 1, 3, 3), dtype=np.float32)), pair, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 2.0))
def test_triplet_nonnegative_and_zero_iff_satisfied(seed, margin):
    rng = np.random.default_rng(seed)
    prods = rng.random((3, 2, 2))
    good, bad = rng.random((2, 2)), rng.random((2, 2))
    loss = _hinge(prods, good, bad, margin)
    assert loss >= 0.0
    dg = np.sqrt(((prods - good) ** 2).sum(axis=(1, 2)))
    db = np.sqrt(((prods - bad) ** 2).sum(axis=(1, 2)))
    satisfied = bool((np.float32(dg) + np.float32(margin) <= np.float32(db)).all())
    assert (loss == 0.0) == satisfied


# ---------------------------------------------------------------------------
# full triplet loss through a real model


def test_exbl_triplet_matches_straight_recomputation():
    model = build_classifier(TWO_BLOCK)
    rng = np.random.default_rng(3)
    batch = _batch(rng, 3, 12)
    good, bad = rng.random((12, 12)), rng.random((12, 12))
    pair = ExemplarPair.from_arrays(good, bad)
    with Graph(mode="train", rng=np.random.default_rng(0)):
        loss = exbl_triplet_loss(model, batch, pair, margin=1.0)
    oracle = exbl_triplet_value(_weights(model), [im.pixels for im in batch],
                                good.astype(np.float32), bad.astype(np.float32), 1.0)
    np.testing.assert_allclose(float(loss.data), oracle, rtol=1e-5)


def test_exbl_triplet_batch_order_invariant():
    model = build_classifier(TWO_BLOCK)
    rng = np.random.default_rng(4)
    batch = _batch(rng, 4, 12)
    pair = ExemplarPair.from_arrays(rng.random((12, 12)), rng.random((12, 12)))
    with Graph(mode="train", rng=np.random.default_rng(0)):
        fwd = float(exbl_triplet_loss(model, batch, pair, 1.0).data)
    with Graph(mode="train", rng=np.random.default_rng(0)):
        rev = float(exbl_triplet_loss(model, batch[::-1], pair, 1.0).data)
    np.testing.assert_allclose(fwd, rev, rtol=1e-6)


def test_exbl_triplet_reaches_conv_weights():
    cfg = ModelConfig(image_size=12, conv_channels=(3, 5), hidden_width=10, seed=2)
    model = build_classifier(cfg)
    rng = np.random.default_rng(5)
    batch = _batch(rng, 2, 12)
    pair = ExemplarPair.from_arrays(rng.random((12, 12)), rng.random((12, 12)))
    with Graph(mode="train", rng=np.random.default_rng(0)) as g:
        loss = exbl_triplet_loss(model, batch, pair, 1.0)
        backward(g, loss)
        w0 = dict(model.named_params())["conv0.w"]
        assert w0.grad is not None and np.abs(w0.grad).max() > 0
        err = finite_diff_check(g, loss, w0)
    assert err < 1e-3
    for _, t in model.named_params():
        t.grad = None


def test_exbl_triplet_requires_active_graph():
    model = build_classifier(TWO_BLOCK)
    batch = _batch(np.random.default_rng(6), 1, 12)
    pair = ExemplarPair.from_arrays(np.zeros((12, 12)), np.ones((12, 12)))
    with pytest.raises(GraphError):
        exbl_triplet_loss(model, batch, pair, 1.0)


def test_exemplar_pair_shape_contract():
    with pytest.raises(DimensionError):
        ExemplarPair.from_arrays(np.zeros((2, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# input-gradient penalty


def test_rrr_zero_masks_give_exact_zero():
    model = build_classifier(ONE_BLOCK)
    rng = np.random.default_rng(7)
    batch = rng.random((2, 8, 8))
    with Graph(mode="train", rng=np.random.default_rng(0)):
        loss = rrr_loss(model, batch, [np.zeros((8, 8))] * 2)
    assert float(loss.data) == 0.0


def test_rrr_matches_straight_recomputation():
    model = build_classifier(ONE_BLOCK)
    rng = np.random.default_rng(8)
    batch = rng.random((3, 8, 8))
    masks = [rng.integers(0, 2, (8, 8)).astype(float) for _ in range(3)]
    with Graph(mode="train", rng=np.random.default_rng(0)):
        loss = rrr_loss(model, batch, masks)
    oracle = rrr_value(_weights(model), list(batch), masks)
    np.testing.assert_allclose(float(loss.data), oracle, rtol=1e-5)


def test_rrr_all_ones_mask_is_full_gradient_norm():
    model = build_classifier(ONE_BLOCK)
    rng = np.random.default_rng(9)
    batch = rng.random((2, 8, 8))
    with Graph(mode="train", rng=np.random.default_rng(0)):
        loss = rrr_loss(model, batch, [np.ones((8, 8))] * 2)
    # independent route: differentiate the summed log-probabilities by hand
    oracle = rrr_value(_weights(model), list(batch), [np.ones((8, 8))] * 2)
    np.testing.assert_allclose(float(loss.data), oracle, rtol=1e-5)
    assert float(loss.data) > 0.0


def test_rrr_input_gradient_finite_difference():
    # the inner gradient itself, checked against central differences
    model = build_classifier(ONE_BLOCK)
    x_data = np.random.default_rng(10).random((1, 1, 8, 8))
    with Graph(mode="eval") as g:
        x = parameter(x_data, name="x")
        fp = model.forward(x, train=False)
        clipped = op_forward("max_with_scalar", (fp.probs,), {"value": 1e-12})
        s = op_forward("sum", (op_forward("log", (clipped,)),))
        backward(g, s)
        err = finite_diff_check(g, s, x)
    assert err < 1e-3


def test_rrr_contract_errors():
    model = build_classifier(ONE_BLOCK)
    batch = np.random.default_rng(11).random((2, 8, 8))
    with pytest.raises(GraphError):
        rrr_loss(model, batch, [np.ones((8, 8))] * 2)
    with Graph(mode="train", rng=np.random.default_rng(0)):
        with pytest.raises(ContractError, match="mask"):
            rrr_loss(model, batch, [np.ones((8, 8))])
        with pytest.raises(DimensionError):
            rrr_loss(model, batch, [np.ones((4, 4))] * 2)


def test_rrr_surrogate_gradient_tracks_true_penalty():
    # perturb one conv weight and compare the recorded parameter gradient
    # against a central difference of the exact penalty value
    model = build_classifier(ONE_BLOCK)
    rng = np.random.default_rng(12)
    batch = rng.random((2, 8, 8))
    masks = [np.ones((8, 8))] * 2
    with Graph(mode="train", rng=np.random.default_rng(0)) as g:
        loss = rrr_loss(model, batch, masks)
        backward(g, loss)
    w = dict(model.named_params())["conv0.w"]
    recorded = w.grad[0, 0, 0, 0]

    def penalty_at(delta):
        w.data[0, 0, 0, 0] += delta
        try:
            return rrr_value(_weights(model), list(batch), masks)
        finally:
            w.data[0, 0, 0, 0] -= delta
    h = 1e-5
    numeric = (penalty_at(h) - penalty_at(-h)) / (2 * h)
    assert abs(recorded - numeric) / max(abs(numeric), 1e-8) < 5e-2
    for _, t in model.named_params():
        t.grad = None


# ---------------------------------------------------------------------------
# combination


def test_total_loss_frozen_arithmetic():
    with Graph(mode="eval"):
        out = total_loss(constant(1.0), constant(2.0), constant(0.5),
                         LossWeights(expl_scale=1.0))
    assert float(out.data) == 3.5


def test_total_loss_reduces_to_ce():
    with Graph(mode="eval"):
        ce = constant(1.25)
        out = total_loss(ce, constant(7.0), constant(0.0),
                         LossWeights(lambda_l2=0.0, expl_scale=0.0))
    assert float(out.data) == 1.25


def test_total_loss_gradient_is_linear_combination():
    with Graph(mode="eval") as g:
        p = parameter(np.array([2.0]), name="p")
        ce = op_forward("sum", (op_forward("square", (p,)),))
        expl = op_forward("sum", (p,))
        l2 = op_forward("sum", (op_forward("square", (p,)),))
        out = total_loss(ce, expl, l2, LossWeights(expl_scale=0.5))
        backward(g, out)
    # d/dp [p^2 + 0.5 p + p^2] = 2p + 0.5 + 2p = 8.5 at p=2
    np.testing.assert_allclose(p.grad, [8.5], rtol=1e-12)


def test_loss_weights_reject_negative():
    with pytest.raises(ContractError):
        LossWeights(lambda_l2=-1.0)
    with pytest.raises(ContractError):
        LossWeights(margin=float("nan"))


def test_internal_probe_passes_leave_parameter_grads_untouched():
    # building explanation or input-gradient losses runs private backward
    # passes; those must not leak adjoints into the shared parameters
    model = build_classifier(ONE_BLOCK)
    rng = np.random.default_rng(13)
    batch = rng.random((2, 8, 8))
    labeled = [LabeledImage(pixels=batch[i], label=0) for i in range(2)]
    pair = ExemplarPair.from_arrays(rng.random((8, 8)), rng.random((8, 8)))
    with Graph(mode="train", rng=np.random.default_rng(0)):
        rrr_loss(model, batch, [np.ones((8, 8))] * 2)
        exbl_triplet_loss(model, labeled, pair, 1.0)
    assert all(t.grad is None for _, t in model.named_params())
