"""Tensor op semantics, gradient correctness, and Adam behavior."""

import numpy as np
import pytest

from curvebert import numerics as nm
from curvebert.numerics import ops
from curvebert.numerics.optim import OptimizerError

from gradcheck import assert_grads_match, finite_difference


def t(data, grad=True):
    return nm.tensor(data, requires_grad=grad)


# -- matmul --------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        out = nm.matmul(t(np.eye(2)), t([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_dot_product(self):
        out = nm.matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_grad_of_sum_vs_closed_form_and_fd(self):
        rng = np.random.default_rng(0)
        a = t(rng.normal(size=(5, 7)))
        b = t(rng.normal(size=(7, 3)))
        loss = nm.matmul(a, b).sum()
        nm.backward(loss)
        # d sum(ab)/da = ones(5,3) @ b^T
        np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, atol=1e-12)
        fd = finite_difference(lambda: nm.matmul(a, b).sum().item(), [a, b])
        assert np.abs(a.grad - fd[0]).max() < 1e-5
        assert np.abs(b.grad - fd[1]).max() < 1e-5

    def test_batched_broadcast_gradcheck(self):
        rng = np.random.default_rng(1)
        a = t(rng.normal(size=(2, 3, 4)))
        b = t(rng.normal(size=(4, 5)))
        w = rng.normal(size=(2, 3, 5))
        nm.backward((nm.matmul(a, b) * nm.tensor(w)).sum())
        fd = finite_difference(lambda: float((np.matmul(a.data, b.data) * w).sum()), [a, b])
        assert_grads_match([a.grad, b.grad], fd, label="batched matmul")


# -- conv1d --------------------------------------------------------------------


class TestConv1d:
    def test_sum_kernel(self):
        out = nm.conv1d(t([1.0, 1.0, 1.0, 1.0]), t([[1.0, 1.0]]), stride=2, bias=t([0.0]))
        np.testing.assert_array_equal(out.data, [[2.0], [2.0]])

    def test_tokenization_shape(self):
        rng = np.random.default_rng(2)
        out = nm.conv1d(
            t(rng.normal(size=1000), grad=False),
            t(rng.normal(size=(256, 100)), grad=False),
            stride=100,
            bias=t(np.zeros(256), grad=False),
        )
        assert out.shape == (10, 256)

    def test_tiling_error_reports_remainder(self):
        with pytest.raises(nm.TilingError, match="remainder 1"):
            nm.conv1d(t(np.zeros(5)), t(np.zeros((1, 2))), stride=2, bias=t(np.zeros(1)))

    def test_gradcheck_on_small_signal(self):
        rng = np.random.default_rng(3)
        signal = t(rng.normal(size=12))
        kernels = t(rng.normal(size=(3, 4)))
        bias = t(rng.normal(size=3))
        weights = rng.normal(size=(3, 3))

        def loss():
            return (nm.conv1d(signal, kernels, 4, bias).data * weights).sum()

        out = nm.conv1d(signal, kernels, 4, bias)
        nm.backward((out * nm.tensor(weights)).sum())
        fd = finite_difference(loss, [signal, kernels, bias])
        assert np.abs(kernels.grad - fd[1]).max() < 1e-5
        assert_grads_match([signal.grad, kernels.grad, bias.grad], fd, label="conv1d")

    def test_overlapping_stride_gradcheck(self):
        rng = np.random.default_rng(4)
        signal = t(rng.normal(size=10))
        kernels = t(rng.normal(size=(2, 4)))
        bias = t(rng.normal(size=2))
        out = nm.conv1d(signal, kernels, 2, bias)
        assert out.shape == (4, 2)
        nm.backward(out.sum())
        fd = finite_difference(lambda: nm.conv1d(signal, kernels, 2, bias).data.sum(), [signal, kernels, bias])
        assert_grads_match([signal.grad, kernels.grad, bias.grad], fd, label="conv1d overlap")


# -- softmax -------------------------------------------------------------------


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax(t([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_large_logit_no_overflow(self):
        out = nm.softmax(t([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_known_values(self):
        out = nm.softmax(t([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-4)

    def test_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(5)
        x = t(rng.normal(scale=10, size=(40, 9)))
        s = nm.softmax(x)
        assert (s.data >= 0).all()
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        x = t(rng.normal(size=(3, 5)))
        w = rng.normal(size=(3, 5))
        nm.backward((nm.softmax(x) * nm.tensor(w)).sum())
        fd = finite_difference(lambda: (nm.softmax(x).data * w).sum(), [x])
        assert_grads_match([x.grad], fd, label="softmax")


# -- layer_norm ----------------------------------------------------------------


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = nm.layer_norm(t([4.0, 4.0, 4.0, 4.0]), t(np.ones(4)), t(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_two_point_standardization(self):
        out = nm.layer_norm(t([1.0, 3.0]), t(np.ones(2)), t(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_feature_axis_too_small(self):
        with pytest.raises(nm.ShapeError):
            nm.layer_norm(t([1.0]), t([1.0]), t([0.0]))

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        x = t(rng.normal(size=(4, 8)))
        gain = t(rng.normal(size=8))
        shift = t(rng.normal(size=8))
        w = rng.normal(size=(4, 8))
        nm.backward((nm.layer_norm(x, gain, shift) * nm.tensor(w)).sum())
        fd = finite_difference(lambda: (nm.layer_norm(x, gain, shift).data * w).sum(), [x, gain, shift])
        assert np.abs(x.grad - fd[0]).max() < 1e-5
        assert_grads_match([x.grad, gain.grad, shift.grad], fd, label="layer_norm")


# -- cross_entropy -------------------------------------------------------------


class TestCrossEntropy:
    def test_confident_correct_prediction(self):
        logits = t([[100.0, 0.0], [0.0, 100.0]])
        assert nm.cross_entropy(logits, [0, 1]).item() < 1e-6

    def test_uniform_two_classes(self):
        loss = nm.cross_entropy(t([[0.0, 0.0]]), [1])
        assert abs(loss.item() - np.log(2)) < 1e-6

    def test_matches_log_sum_exp(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(2, 3))
        labels = [2, 0]
        # independent evaluation straight from the definition
        lse = np.log(np.exp(logits).sum(axis=1))
        expected = float(np.mean(lse - logits[[0, 1], labels]))
        got = nm.cross_entropy(t(logits), labels).item()
        assert abs(got - expected) < 1e-9

    def test_out_of_range_label_reports_index(self):
        with pytest.raises(nm.LabelError, match="label 3 at index 1"):
            nm.cross_entropy(t(np.zeros((2, 3))), [0, 3])

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        logits = t(rng.normal(size=(4, 6)))
        labels = [1, 0, 5, 2]
        nm.backward(nm.cross_entropy(logits, labels))
        fd = finite_difference(lambda: nm.cross_entropy(logits, labels).item(), [logits])
        assert_grads_match([logits.grad], fd, label="cross_entropy")


# -- mse -----------------------------------------------------------------------


class TestMse:
    def test_identical_inputs(self):
        a = t([1.0, 2.0])
        assert nm.mse(a, t([1.0, 2.0])).item() == 0.0

    def test_hand_computed(self):
        assert nm.mse(t([0.0, 0.0]), t([1.0, 3.0])).item() == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            nm.mse(t([0.0, 0.0]), t([1.0]))

    def test_gradient_formula_and_fd(self):
        rng = np.random.default_rng(10)
        a = t(rng.normal(size=(3, 4)))
        b = t(rng.normal(size=(3, 4)))
        nm.backward(nm.mse(a, b))
        np.testing.assert_allclose(a.grad, 2 * (a.data - b.data) / 12, atol=1e-12)
        fd = finite_difference(lambda: nm.mse(a, b).item(), [a, b])
        assert_grads_match([a.grad, b.grad], fd, label="mse")


# -- backward engine -----------------------------------------------------------


class TestBackward:
    def test_sum_gives_ones(self):
        x = t(np.arange(6.0).reshape(2, 3))
        nm.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = t([1.0, 2.0, 3.0])
        nm.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_root_rejected(self):
        x = t([1.0, 2.0])
        with pytest.raises(nm.GradientError):
            nm.backward(x * x)

    def test_repeated_backward_accumulates_and_reset_clears(self):
        x = t([1.0, 2.0])
        loss = (x * x).sum()
        nm.backward(loss)
        nm.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        nm.reset_grads([x])
        assert x.grad is None

    def test_reused_node_fan_out(self):
        x = t([2.0])
        y = x * x  # x used twice
        z = (y + x).sum()
        nm.backward(z)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_constants_do_not_collect_grads(self):
        x = t([1.0, 2.0])
        c = nm.tensor([3.0, 4.0])
        nm.backward((x * c).sum())
        assert c.grad is None


# -- elementwise / shape op gradients -------------------------------------------


def _scatter_case():
    x = t(np.random.default_rng(11).normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    return x, lambda: float(x.data[idx].sum() * 2.0), lambda: (x[idx] * 2.0).sum()


@pytest.mark.parametrize(
    "name,builder",
    [
        ("add_broadcast", lambda x, y: (x + y.reshape(1, 4)).sum()),
        ("sub", lambda x, y: (x - y.reshape(1, 4)).sum()),
        ("mul_broadcast", lambda x, y: (x * y.reshape(1, 4)).mean()),
        ("gelu", lambda x, y: (ops.gelu(x) * ops.gelu(x)).sum()),
        ("tanh_exp", lambda x, y: (ops.tanh(x) + ops.exp(x * 0.1)).sum()),
        ("log_of_positive", lambda x, y: ops.log(ops.exp(x)).sum()),
        ("stack", lambda x, y: nm.stack([x, x * 3.0], axis=1).mean()),
        ("transpose_reshape", lambda x, y: x.transpose((1, 0)).reshape(12).sum()),
        ("mean_axis", lambda x, y: x.mean(axis=0).sum()),
        ("concat", lambda x, y: nm.concat([x, x * 2.0], axis=0).sum()),
        ("slice", lambda x, y: x[1:, :2].sum()),
    ],
)
def test_op_gradients_match_finite_differences(name, builder):
    rng = np.random.default_rng(12)
    x = t(rng.normal(size=(3, 4)))
    y = t(rng.normal(size=4))
    nm.backward(builder(x, y))
    fd = finite_difference(lambda: builder(x, y).item(), [x, y])
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data),
                y.grad if y.grad is not None else np.zeros_like(y.data)]
    assert_grads_match(analytic, fd, label=name)


def test_fancy_index_gradient_accumulates_duplicates():
    x, fd_fn, loss_fn = _scatter_case()
    nm.backward(loss_fn())
    fd = finite_difference(fd_fn, [x])
    assert_grads_match([x.grad], fd, label="fancy index")
    # row 2 selected twice -> gradient 4, unselected rows 0
    np.testing.assert_allclose(x.grad[2], 4.0)
    np.testing.assert_allclose(x.grad[1], 0.0)


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = t(rng.normal(scale=50, size=(6, 8)))
    outs = [
        nm.softmax(x),
        nm.layer_norm(x, t(np.ones(8)), t(np.zeros(8))),
        ops.gelu(x),
        ops.tanh(x),
        nm.matmul(x, t(rng.normal(size=(8, 2)))),
        nm.mse(x, t(rng.normal(size=(6, 8)))),
    ]
    for out in outs:
        assert np.isfinite(out.data).all()


# -- Adam ----------------------------------------------------------------------


class TestAdam:
    def test_zero_grad_zero_decay_is_identity(self):
        p = t(np.array([1.5, -2.0]))
        p.grad = np.zeros(2)
        state = nm.AdamState(weight_decay=0.0)
        nm.adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_lr_zero_is_identity_on_parameters(self):
        rng = np.random.default_rng(14)
        p = t(rng.normal(size=4))
        before = p.data.copy()
        p.grad = rng.normal(size=4)
        nm.adam_step({"p": p}, nm.AdamState(lr=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_closed_form(self):
        p = t(np.array([0.0]))
        p.grad = np.array([1.0])
        state = nm.AdamState(lr=0.001, weight_decay=0.0)
        nm.adam_step({"p": p}, state)
        # bias-corrected first step: -lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data, [-0.001], atol=1e-9)

    def test_quadratic_bowl_convergence(self):
        x = t(np.array([5.0]))
        state = nm.AdamState(lr=0.01, weight_decay=0.0)
        for _ in range(2000):
            nm.reset_grads([x])
            nm.backward((x * x).sum())
            nm.adam_step({"x": x}, state)
        assert abs(x.data[0]) < 0.1

    def test_missing_gradient_names_parameter(self):
        p = t(np.array([1.0]))
        q = t(np.array([2.0]))
        p.grad = np.array([0.5])
        with pytest.raises(OptimizerError, match="'q'"):
            nm.adam_step({"p": p, "q": q}, nm.AdamState())

    def test_decoupled_decay_applied_before_update(self):
        p = t(np.array([10.0]))
        p.grad = np.array([0.0])
        state = nm.AdamState(lr=0.1, weight_decay=0.5)
        nm.adam_step({"p": p}, state)
        # zero gradient: only the multiplicative decay acts
        np.testing.assert_allclose(p.data, [10.0 * (1 - 0.1 * 0.5)])
