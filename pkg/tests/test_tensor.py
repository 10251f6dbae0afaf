"""Tensor core: frozen hand-computed examples plus the finite-difference
gradient oracle for every differentiable op."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionbn import tensor as T
from fusionbn.errors import (
    ConfigurationError,
    ContractError,
    DegenerateBatchError,
    ShapeError,
)


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of scalar-valued f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_grad(build_loss, *shapes, seed=0, tol=1e-3):
    """build_loss maps Vars (one per shape) to a scalar Var; compare its
    analytic gradient against central differences for every input."""
    rng = np.random.default_rng(seed)
    values = [rng.uniform(-1.0, 1.0, size=s) for s in shapes]
    for target in range(len(values)):
        params = [T.parameter(v.copy()) for v in values]
        loss = build_loss(*params)
        T.backward(loss)
        analytic = params[target].grad

        def f(x, target=target):
            args = [T.Var(v.copy()) for v in values]
            args[target] = T.Var(x)
            return build_loss(*args).value

        numeric = numeric_grad(f, values[target])
        err = relative_error(analytic, numeric)
        assert err < tol, f"input {target}: relative error {err:.2e}"


# ---------------------------------------------------------------------------
# matmul


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(T.matmul(eye, b).value, b)

    def test_hand_product(self):
        out = T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.array_equal(out.value, np.array([[11.0]]))

    def test_zero_annihilates(self):
        z = np.zeros((3, 4))
        b = np.arange(8.0).reshape(4, 2)
        assert not T.matmul(z, b).value.any()

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_gradient(self):
        check_grad(lambda a, b: T.sum_all(T.matmul(a, b)), (3, 4), (4, 2))


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_zero_input(self):
        out = T.conv2d_array(np.zeros((1, 1, 5, 5)), np.ones((1, 1, 3, 3)))
        assert not out.any()

    def test_ones_sum_to_nine(self):
        out = T.conv2d_array(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_kernel_exact(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(2, 3, 8, 8)).astype(np.float32)
        k = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = T.conv2d_array(x, k, stride=1, padding=1)
        assert np.array_equal(out, x)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d_array(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))

    def test_non_integral_output(self):
        with pytest.raises(ConfigurationError):
            T.conv2d_array(np.zeros((1, 1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2)

    def test_gradient_input_and_kernel(self):
        check_grad(
            lambda x, w: T.sum_all(T.mul(T.conv2d(x, w, 1, 1), T.conv2d(x, w, 1, 1))),
            (2, 2, 5, 5),
            (3, 2, 3, 3),
        )

    def test_gradient_strided(self):
        check_grad(
            lambda x, w: T.sum_all(T.relu(T.conv2d(x, w, 2, 1))),
            (2, 2, 7, 7),
            (2, 2, 3, 3),
        )

    def test_gradient_bias(self):
        check_grad(
            lambda x, w, b: T.sum_all(
                T.mul(T.conv2d(x, w, 1, 0, bias=b), T.conv2d(x, w, 1, 0, bias=b))
            ),
            (2, 2, 4, 4),
            (2, 2, 3, 3),
            (2,),
        )


# ---------------------------------------------------------------------------
# channel_moments


class TestChannelMoments:
    def test_constant(self):
        x = np.full((2, 3, 4, 4), 5.0, dtype=np.float32)
        mean, var = T.channel_moments(x)
        assert np.allclose(mean, 5.0) and np.allclose(var, 0.0)

    def test_two_values(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        mean, var = T.channel_moments(x)
        assert mean[0] == 2.0 and var[0] == 1.0

    def test_standardized_output_refeeds(self):
        rng = np.random.default_rng(0)
        x = rng.normal(2.0, 3.0, size=(8, 2, 6, 6)).astype(np.float32)
        mean, var = T.channel_moments(x)
        z = (x - mean[None, :, None, None].astype(np.float32)) / np.sqrt(
            var[None, :, None, None].astype(np.float32)
        )
        m2, v2 = T.channel_moments(z)
        assert np.abs(m2).max() < 1e-5 and np.abs(v2 - 1.0).max() < 1e-4

    def test_degenerate(self):
        with pytest.raises(DegenerateBatchError):
            T.channel_moments(np.zeros((1, 3, 1, 1)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 2, 3, 3))
        perm = rng.permutation(5)
        m1, v1 = T.channel_moments(x)
        m2, v2 = T.channel_moments(x[perm])
        assert np.allclose(m1, m2, atol=1e-12) and np.allclose(v1, v2, atol=1e-12)


# ---------------------------------------------------------------------------
# backward contracts


class TestBackward:
    def test_sum_gives_ones(self):
        w = T.parameter(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum_all(w))
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_square_at_three(self):
        w = T.parameter(np.array([3.0]))
        T.backward(T.sum_all(T.mul(w, w)))
        assert np.allclose(w.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        w = T.parameter(np.ones((2, 2)))
        with pytest.raises(ContractError):
            T.backward(T.mul(w, w))

    def test_shared_node_accumulates(self):
        w = T.parameter(np.array([2.0]))
        y = T.add(T.mul(w, w), w)  # w^2 + w -> grad 2w + 1 = 5
        T.backward(T.sum_all(y))
        assert np.allclose(w.grad, [5.0])

    def test_small_mlp_finite_differences(self):
        def loss_fn(x, w1, b1, w2):
            h = T.relu(T.add_rowvec(T.matmul(x, w1), b1))
            out = T.matmul(h, w2)
            return T.sum_all(T.mul(out, out))

        check_grad(loss_fn, (4, 3), (3, 5), (5,), (5, 2))


# ---------------------------------------------------------------------------
# remaining differentiable ops against the oracle


class TestOpGradients:
    def test_relu(self):
        check_grad(lambda x: T.sum_all(T.mul(T.relu(x), T.relu(x))), (4, 5))

    def test_sigmoid(self):
        check_grad(lambda x: T.sum_all(T.mul(T.sigmoid(x), T.sigmoid(x))), (3, 4))

    def test_maxpool(self):
        check_grad(
            lambda x: T.sum_all(T.mul(T.maxpool2(x), T.maxpool2(x))), (2, 2, 4, 4)
        )

    def test_mean_spatial(self):
        check_grad(
            lambda x: T.sum_all(T.mul(T.mean_spatial(x), T.mean_spatial(x))),
            (2, 3, 4, 4),
        )

    def test_upsample_bilinear(self):
        check_grad(
            lambda x: T.sum_all(
                T.mul(T.upsample_bilinear(x, 8, 8), T.upsample_bilinear(x, 8, 8))
            ),
            (2, 2, 4, 4),
        )

    def test_conv1x1(self):
        check_grad(
            lambda x, w, b: T.sum_all(
                T.mul(T.conv1x1(x, w, b), T.conv1x1(x, w, b))
            ),
            (2, 3, 4, 4),
            (2, 3),
            (2,),
        )

    def test_batchnorm(self):
        check_grad(
            lambda x, g, a: T.sum_all(
                T.mul(
                    T.batchnorm_train(x, g, a, eps=1e-5)[0],
                    T.batchnorm_train(x, g, a, eps=1e-5)[0],
                )
            ),
            (4, 3, 3, 3),
            (3,),
            (3,),
        )

    def test_softmax_cross_entropy(self):
        labels = np.array([0, 2, 1])
        check_grad(
            lambda z: T.softmax_cross_entropy(z, labels), (3, 4)
        )

    def test_dice_loss(self):
        rng = np.random.default_rng(1)
        target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)

        def build(x):
            return T.soft_dice_loss(T.sigmoid(x), target)

        check_grad(build, (2, 1, 4, 4))

    def test_add_sub(self):
        check_grad(lambda a, b: T.sum_all(T.mul(T.sub(a, b), T.add(a, b))), (3, 3), (3, 3))

    def test_reshape_scalar_ops(self):
        check_grad(
            lambda x: T.sum_all(
                T.mul(T.add_scalar(T.mul_scalar(T.reshape(x, (6,)), 2.0), 1.0),
                      T.reshape(x, (6,)))
            ),
            (2, 3),
        )


# ---------------------------------------------------------------------------
# loss values


class TestLossValues:
    def test_uniform_logits_cross_entropy(self):
        for k in (2, 5, 9):
            logits = np.zeros((4, k))
            labels = np.arange(4) % k
            loss = T.softmax_cross_entropy(logits, labels)
            assert np.isclose(float(loss.value), np.log(k), atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_perfect_mask_dice(self):
        mask = np.ones((1, 1, 4, 4))
        loss = T.soft_dice_loss(T.Var(mask.copy()), mask)
        assert float(loss.value) == 0.0

    def test_half_probs_full_mask(self):
        probs = np.full((1, 1, 5, 5), 0.5)
        mask = np.ones((1, 1, 5, 5))
        loss = T.soft_dice_loss(T.Var(probs), mask)
        assert np.isclose(float(loss.value), 1.0 / 3.0, atol=1e-12)


# ---------------------------------------------------------------------------
# determinism


def test_forward_determinism():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.uniform(-1, 1, size=(4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d_array(x, w, 1, 1)
    b = T.conv2d_array(x.copy(), w.copy(), 1, 1)
    assert np.array_equal(a, b)
