"""Unit tests for the reverse-mode engine: frozen op values, gradient
oracles against central differences, tape replay, and checkpoint i/o."""

import numpy as np
import pytest

from helpers_gradcheck import (
    TRIAL_BUILDERS,
    build_composite_classifier_loss,
    run_op_trials,
)
from xbl.autodiff import (
    OP_KINDS,
    Graph,
    Tensor,
    add,
    backward,
    bilinear_matrix,
    constant,
    finite_diff_check,
    load_checkpoint,
    op_forward,
    save_checkpoint,
    scale,
)
from xbl.errors import ContractError, DimensionError, GraphError, NumericError
from xbl.utils import derive_rng


class TestOpValues:
    def test_relu_basic(self):
        with Graph(mode="eval"):
            y = op_forward("relu", (constant([-1.0, 0.0, 2.0]),))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_softmax_uniform_logits(self):
        with Graph(mode="eval"):
            y = op_forward("softmax", (constant([0.0, 0.0, 0.0, 0.0]),))
        np.testing.assert_allclose(y.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=1e-7)

    def test_conv2d_all_ones(self):
        x = constant(np.ones((1, 1, 4, 4)))
        w = constant(np.ones((1, 1, 3, 3)))
        b = constant(np.zeros(1))
        with Graph(mode="eval"):
            y = op_forward("conv2d", (x, w, b), {"padding": 0})
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(y.data, np.full((1, 1, 2, 2), 9.0), rtol=0, atol=1e-6)

    def test_max_pool_and_global_avg(self):
        x = constant(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        with Graph(mode="eval"):
            pooled = op_forward("max_pool2d", (x,), {"window": 2})
            avg = op_forward("avg_pool2d_global", (x,))
        np.testing.assert_array_equal(pooled.data, [[[[5.0, 7.0], [13.0, 15.0]]]])
        np.testing.assert_allclose(avg.data, [[7.5]])

    def test_upsample_same_size_is_identity(self):
        rng = derive_rng(3, "upsample-id")
        x = constant(rng.uniform(0, 1, (1, 1, 5, 7)))
        with Graph(mode="eval"):
            y = op_forward("upsample_bilinear", (x,), {"out_h": 5, "out_w": 7})
        np.testing.assert_allclose(y.data, x.data, rtol=0, atol=1e-7)

    def test_bilinear_matrix_rows_sum_to_one(self):
        mat = bilinear_matrix(32, 8)
        np.testing.assert_allclose(mat.sum(axis=1), np.ones(32), rtol=0, atol=1e-12)

    def test_forward_does_not_mutate_inputs(self):
        x = Tensor([[1.0, -2.0], [3.0, 4.0]], requires_grad=True)
        before = x.data.copy()
        with Graph(mode="eval"):
            op_forward("relu", (x,))
            op_forward("square", (x,))
        np.testing.assert_array_equal(x.data, before)


class TestBackward:
    def test_grad_of_sum_of_squares(self):
        x = Tensor([3.0], requires_grad=True)
        with Graph(mode="eval") as g:
            loss = op_forward("sum", (op_forward("square", (x,)),))
        backward(g, loss)
        np.testing.assert_allclose(x.grad, [6.0], rtol=0, atol=1e-6)

    def test_relu_blocks_gradient_for_negative_input(self):
        x = Tensor([-2.0], requires_grad=True)
        with Graph(mode="eval") as g:
            loss = op_forward("sum", (op_forward("relu", (x,)),))
        backward(g, loss)
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_fanout_accumulates_additively(self):
        x = Tensor([1.5, -0.5], requires_grad=True)
        with Graph(mode="eval") as g:
            y = op_forward("elementwise_mul", (x, x))  # same tensor twice
            loss = op_forward("sum", (y,))
        backward(g, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_backward_is_linear_in_the_loss(self):
        rng = derive_rng(11, "linearity")
        base = rng.uniform(-1, 1, (4,))
        a, b = 2.5, -0.75

        def grad_of(scale_one, scale_two):
            x = Tensor(base, requires_grad=True, dtype=np.float64)
            with Graph(mode="eval") as g:
                l1 = op_forward("sum", (op_forward("square", (x,)),))
                l2 = op_forward("sum", (op_forward("elementwise_mul", (
                    x, constant([1.0, 2.0, 3.0, 4.0], dtype=np.float64))),))
                loss = add(scale(l1, scale_one), scale(l2, scale_two))
            backward(g, loss)
            return x.grad

        combined = grad_of(a, b)
        expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        np.testing.assert_allclose(combined, expected, rtol=1e-12)

    def test_repeated_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Graph(mode="eval") as g:
            loss = op_forward("sum", (op_forward("square", (x,)),))
        backward(g, loss)
        backward(g, loss)
        np.testing.assert_allclose(x.grad, [8.0], rtol=1e-6)

    def test_same_seed_same_bits(self):
        def run():
            rng = derive_rng(7, "determinism")
            x = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
            with Graph(mode="eval") as g:
                loss = op_forward("sum", (op_forward("square", (x,)),))
            backward(g, loss)
            return loss.data.copy(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestFiniteDifferences:
    def test_composite_classifier_loss_32bit(self):
        rng = derive_rng(0, "composite32")
        graph, loss, wrt = build_composite_classifier_loss(rng, np.float32)
        assert finite_diff_check(graph, loss, wrt, 1e-4) < 1e-3

    def test_composite_classifier_loss_64bit(self):
        rng = derive_rng(0, "composite64")
        graph, loss, wrt = build_composite_classifier_loss(rng, np.float64)
        assert finite_diff_check(graph, loss, wrt, 1e-4) < 1e-6

    def test_conv_relu_loss_32bit(self):
        rng = derive_rng(5, "convrelu")
        x = Tensor(rng.uniform(-1, 1, (1, 1, 6, 6)), requires_grad=True, dtype=np.float32)
        w = Tensor(rng.uniform(-0.5, 0.5, (2, 1, 3, 3)), requires_grad=True, dtype=np.float32)
        b = Tensor(np.zeros(2), requires_grad=True, dtype=np.float32)
        with Graph(mode="eval") as g:
            h = op_forward("relu", (op_forward("conv2d", (x, w, b)),))
            loss = op_forward("sum", (h,))
        assert finite_diff_check(g, loss, x, 1e-4) < 1e-3

    @pytest.mark.parametrize("kind", sorted(OP_KINDS))
    def test_op_gradients_64bit(self, kind):
        # quick sweep; the acceptance suite runs the full 100-trial version
        assert run_op_trials(kind, 10, np.float64, 1e-4, seed=1) < 1e-6

    @pytest.mark.parametrize("kind", sorted(OP_KINDS))
    def test_op_gradients_32bit(self, kind):
        assert run_op_trials(kind, 10, np.float32, 1e-4, seed=2) < 1e-3


class TestGraphSemantics:
    def test_dropout_identity_in_eval_mode(self):
        x = constant(np.ones((2, 3)))
        with Graph(mode="eval"):
            y = op_forward("dropout", (x,), {"p": 0.5})
        np.testing.assert_array_equal(y.data, x.data)

    def test_dropout_train_mode_masks_and_scales(self):
        x = constant(np.ones((50, 50)))
        with Graph(mode="train", rng=derive_rng(9, "drop")):
            y = op_forward("dropout", (x,), {"p": 0.5})
        kept = y.data != 0
        assert 0.3 < kept.mean() < 0.7
        np.testing.assert_allclose(y.data[kept], 2.0, rtol=1e-6)

    def test_dropout_replay_reuses_mask(self):
        x = Tensor(np.ones((4, 4)), requires_grad=True)
        with Graph(mode="train", rng=derive_rng(10, "drop")) as g:
            y = op_forward("dropout", (x,), {"p": 0.5})
        first = y.data.copy()
        g.recompute()
        np.testing.assert_array_equal(y.data, first)

    def test_dropout_train_mode_requires_rng(self):
        x = constant(np.ones(4))
        with Graph(mode="train"):
            with pytest.raises(GraphError):
                op_forward("dropout", (x,), {"p": 0.5})

    def test_op_outside_graph_raises(self):
        with pytest.raises(GraphError):
            op_forward("relu", (constant([1.0]),))

    def test_backward_rejects_nonscalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph(mode="eval") as g:
            y = op_forward("square", (x,))
        with pytest.raises(ContractError):
            backward(g, y)

    def test_backward_rejects_foreign_tensor(self):
        x = Tensor([1.0], requires_grad=True)
        with Graph(mode="eval") as g:
            op_forward("square", (x,))
        stranger = constant([1.0])
        with pytest.raises(GraphError):
            backward(g, stranger)

    def test_shape_mismatch_raises_dimension_error(self):
        a = constant(np.ones((2, 3)))
        b = constant(np.ones((4, 5)))
        with Graph(mode="eval"):
            with pytest.raises(DimensionError):
                op_forward("elementwise_mul", (a, b))

    def test_bad_pool_window_raises(self):
        x = constant(np.ones((1, 1, 5, 5)))
        with Graph(mode="eval"):
            with pytest.raises(DimensionError):
                op_forward("max_pool2d", (x,), {"window": 2})

    def test_nonfinite_output_raises_numeric_error(self):
        x = constant([1e30], dtype=np.float32)
        with Graph(mode="eval"):
            with pytest.raises(NumericError):
                op_forward("square", (x,))

    def test_log_rejects_nonpositive(self):
        with Graph(mode="eval"):
            with pytest.raises(NumericError):
                op_forward("log", (constant([0.0]),))

    def test_unknown_kind_rejected(self):
        with Graph(mode="eval"):
            with pytest.raises(ContractError):
                op_forward("reshape", (constant([1.0]),))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = derive_rng(21, "ckpt")
        tensors = [
            ("conv0.w", rng.standard_normal((4, 1, 3, 3)).astype(np.float32)),
            ("conv0.b", np.zeros(4, dtype=np.float32)),
            ("head.w", rng.standard_normal((4, 2)).astype(np.float32)),
        ]
        path = tmp_path / "weights.xblw"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert list(loaded) == [name for name, _ in tensors]
        for name, arr in tensors:
            assert loaded[name].dtype == np.float32
            assert loaded[name].tobytes() == arr.tobytes()
            assert loaded[name].shape == arr.shape

    def test_header_format(self, tmp_path):
        path = tmp_path / "w.xblw"
        save_checkpoint(path, [("a", np.ones(2, dtype=np.float32))])
        assert path.read_bytes().startswith(b"XBLW1 1\n")

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "w.xblw"
        save_checkpoint(path, [("a", np.ones(8, dtype=np.float32))])
        clipped = path.read_bytes()[:-5]
        bad = tmp_path / "bad.xblw"
        bad.write_bytes(clipped)
        with pytest.raises(ContractError):
            load_checkpoint(bad)
