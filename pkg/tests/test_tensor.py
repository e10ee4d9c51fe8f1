"""Tape mechanics, backward semantics, and the basic differentiable ops."""

import numpy as np
import pytest

from specmap import ops
from specmap.gradcheck import avoid_kinks, grad_check
from specmap.tensor import Tape, Tensor, backward


def randn(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestAffine:
    def test_zero_input(self):
        x = Tensor(np.zeros((3, 4)))
        w = Tensor(randn((4, 2)))
        b = Tensor(np.zeros(2))
        assert np.all(ops.affine(x, w, b).data == 0)

    def test_identity(self):
        x = Tensor(np.eye(2))
        w = Tensor(np.eye(2))
        b = Tensor(np.zeros(2))
        assert np.array_equal(ops.affine(x, w, b).data, np.eye(2))

    def test_matches_triple_loop_oracle(self):
        x, w, b = Tensor(randn((3, 4), 1)), Tensor(randn((4, 2), 2)), Tensor(randn(2, 3))
        got = ops.affine(x, w, b).data
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                want[i, j] = b.data[j]
                for k in range(4):
                    want[i, j] += x.data[i, k] * w.data[k, j]
        assert np.abs(got - want).max() < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ops.ShapeError):
            ops.affine(Tensor(randn((3, 5))), Tensor(randn((4, 2))), Tensor(np.zeros(2)))


class TestActivations:
    def test_relu_negative_clamps(self):
        assert ops.relu(Tensor([-1.0])).data[0] == 0.0

    def test_leaky_relu_slope(self):
        assert ops.leaky_relu(Tensor([-1.0])).data[0] == pytest.approx(-0.3)

    def test_elu_negative(self):
        assert ops.elu(Tensor([-1.0])).data[0] == pytest.approx(np.exp(-1) - 1, abs=1e-12)

    def test_apply_activation_dispatch(self):
        x = Tensor(randn(7, 3))
        for kind in ("relu", "leaky_relu", "elu", "sigmoid", "tanh"):
            out = ops.apply_activation(Tensor(x.data.copy()), kind)
            assert out.shape == x.shape
        with pytest.raises(ValueError):
            ops.apply_activation(x, "softplus")


class TestLosses:
    def test_mse_identical_is_zero(self):
        a = Tensor(randn((4, 5)))
        assert ops.mse(a, Tensor(a.data.copy())).item() == 0.0

    def test_mse_single_unit_error(self):
        assert ops.mse(Tensor([1.0, 0.0]), Tensor([0.0, 0.0])).item() == pytest.approx(0.5)

    def test_mse_matches_loop_oracle(self):
        a, b = randn((3, 7), 4), randn((3, 7), 5)
        want = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(7)) / 21
        assert ops.mse(Tensor(a), Tensor(b)).item() == pytest.approx(want, rel=1e-12)

    def test_cross_entropy_uniform_is_log_d(self):
        logits = Tensor(np.full((4, 1999), 3.7))
        ce = ops.softmax_cross_entropy(logits, np.array([0, 5, 100, 1998]))
        assert abs(ce.item() - np.log(1999)) < 1e-12

    def test_cross_entropy_confident_correct(self):
        logits = np.zeros((1, 50))
        logits[0, 7] = 30.0
        assert ops.softmax_cross_entropy(Tensor(logits), np.array([7])).item() < 1e-9

    def test_cross_entropy_matches_direct_formula(self):
        logits = randn((4, 7), 6)
        labels = np.array([0, 6, 3, 2])
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        want = -np.log(p[np.arange(4), labels]).mean()
        got = ops.softmax_cross_entropy(Tensor(logits), labels).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_cross_entropy_nonnegative_random(self):
        for seed in range(20):
            logits = Tensor(randn((5, 11), seed) * 10)
            labels = np.random.default_rng(seed).integers(0, 11, 5)
            assert ops.softmax_cross_entropy(logits, labels).item() >= 0.0

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(Tensor(randn((2, 4))), np.array([0, 4]))


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = Tensor(randn(6, 1), requires_grad=True)
        with Tape() as tape:
            loss = ops.weighted_sum(ops.mul(x, x), np.ones(6))
        backward(tape, loss)
        assert np.abs(x.grad - 2 * x.data).max() < 1e-12

    def test_frozen_leaf_receives_no_gradient(self):
        x = Tensor(randn(4, 2), requires_grad=True)
        w = Tensor(randn(4, 3), requires_grad=False)
        with Tape() as tape:
            loss = ops.weighted_sum(ops.mul(x, w), np.ones(4))
        backward(tape, loss)
        assert w.grad is None
        assert x.grad is not None

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.weighted_sum(ops.mul(x, x), np.ones(1))
        backward(tape, loss)
        backward(tape, loss)
        assert x.grad[0] == pytest.approx(4 * 3.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(randn(3, 4), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        with pytest.raises(ValueError):
            backward(tape, y)

    def test_off_tape_loss_rejected(self):
        x = Tensor(randn(3, 5), requires_grad=True)
        tape = Tape()
        loss = ops.mse(x, Tensor(np.zeros(3)))  # recorded nowhere
        with pytest.raises(ValueError):
            backward(tape, loss)

    def test_records_in_topological_order(self):
        x = Tensor(randn((2, 6)), requires_grad=True)
        with Tape() as tape:
            a = ops.relu(x)
            b = ops.mul(a, a)
            ops.mse(b, Tensor(np.zeros((2, 6))))
        produced = []
        for rec in tape.records:
            for inp in rec.inputs:
                if tape.produced(inp):
                    assert id(inp) in produced
            produced.append(id(rec.output))

    def test_composite_gradcheck(self):
        x = Tensor(avoid_kinks(randn((3, 4), 7)), requires_grad=True)
        w = Tensor(randn((4, 2), 8), requires_grad=True)
        b = Tensor(randn(2, 9), requires_grad=True)
        target = Tensor(randn((3, 2), 10))

        def fn(xx, ww, bb):
            return ops.mse(ops.relu(ops.affine(xx, ww, bb)), target)

        assert grad_check(fn, [x, w, b], eps=1e-5) <= 1e-4

    def test_fixed_seed_bitwise_reproducible(self):
        def run():
            x = Tensor(randn((4, 6), 3), requires_grad=True)
            w = Tensor(randn((6, 5), 4), requires_grad=True)
            with Tape() as tape:
                loss = ops.mse(ops.tanh(ops.matmul(x, w)), Tensor(np.zeros((4, 5))))
            backward(tape, loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestStructuralOps:
    def test_slice_concat_roundtrip(self):
        x = Tensor(randn((5, 8), 11), requires_grad=True)
        parts = [ops.slice_cols(x, 0, 3), ops.slice_cols(x, 3, 8)]
        assert np.array_equal(ops.concat_cols(parts).data, x.data)

    def test_splice_rows_matches_dsp_splice(self):
        from specmap import dsp
        mat = randn((9, 4), 12)
        got = ops.splice_rows(Tensor(mat), context=2).data
        want = dsp.splice(mat, context=2)
        assert np.array_equal(got, want)

    def test_structural_gradchecks(self):
        x = Tensor(randn((4, 6), 13), requires_grad=True)
        w4 = np.random.default_rng(0).standard_normal((1, 3, 4, 6))
        checks = [
            (lambda t: ops.weighted_sum(ops.splice_rows(t, 2), randn((4, 30), 1)), x),
            (lambda t: ops.weighted_sum(ops.repeat_rows(t, 3, 10), randn((10, 6), 2)), x),
            (lambda t: ops.weighted_sum(ops.reshape(t, (2, 12)), randn((2, 12), 3)), x),
            (lambda t: ops.weighted_sum(ops.slice_rows(t, 1, 3), randn((2, 6), 4)), x),
            (lambda t: ops.weighted_sum(ops.rows_from_maps(t), randn((4, 18), 5)),
             Tensor(w4.copy(), requires_grad=True)),
        ]
        for fn, tensor in checks:
            assert grad_check(fn, [tensor], eps=1e-5) <= 1e-4


class TestDebugValidation:
    def test_nan_detection_toggles(self):
        from specmap import tensor as T
        x = Tensor(np.array([1.0, np.inf]))
        T.set_debug_validation(True)
        try:
            with pytest.raises(FloatingPointError):
                ops.relu(x)
        finally:
            T.set_debug_validation(False)
        ops.relu(x)  # silent once disabled
