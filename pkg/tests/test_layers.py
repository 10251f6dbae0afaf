"""Layer zoo: batch-norm forward rules, running-statistic updates, the
training loop, and the weight-decay contract."""

import numpy as np
import pytest

from fusionbn import tensor as T
from fusionbn.errors import ConfigurationError, DegenerateBatchError
from fusionbn.layers import (
    BatchNormState,
    NetworkSpec,
    bn_forward_source,
    bn_forward_train,
    build_model,
    source_apply,
)
from fusionbn.stainsim import CenterDataset, StainTransform
from fusionbn.train import SGDM, TrainRecipe, RECIPES, train


def make_state(c=1, eps=1e-12, **kw):
    st = BatchNormState.create(c, eps=eps)
    for key, value in kw.items():
        setattr(st, key, np.asarray(value, dtype=np.float64).reshape(-1))
    return st


class TestBnTrain:
    def test_two_value_batch(self):
        st = make_state()
        x = np.array([1.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1)
        out = bn_forward_train(x, st)
        assert np.allclose(out.ravel(), [-1.0, 1.0], atol=1e-6)

    def test_affine_on_standardized(self):
        st = make_state()
        st.gamma = np.array([2.0], dtype=np.float32)
        st.alpha = np.array([5.0], dtype=np.float32)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(16, 1, 4, 4)).astype(np.float32)
        mean, var = T.channel_moments(x)
        z = ((x.astype(np.float64) - mean) / np.sqrt(var)).astype(np.float32)
        out = bn_forward_train(z.copy(), st)
        assert np.allclose(out, 2.0 * ((z - z.mean()) / z.std()) + 5.0, atol=1e-4)

    def test_momentum_one_copies_batch_mean(self):
        st = make_state()
        st.momentum = 1.0
        x = np.array([2.0, 6.0], dtype=np.float32).reshape(2, 1, 1, 1)
        bn_forward_train(x, st)
        assert np.allclose(st.source_mean, [4.0])
        assert np.allclose(st.source_var, [4.0])

    def test_ema_update(self):
        st = make_state()  # starts at (0, 1), momentum 0.1
        x = np.array([1.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1)
        bn_forward_train(x, st)
        assert np.allclose(st.source_mean, [0.2])
        assert np.allclose(st.source_var, [0.9 * 1.0 + 0.1 * 1.0])

    def test_degenerate_batch_raises(self):
        with pytest.raises(DegenerateBatchError):
            bn_forward_train(np.zeros((1, 1, 1, 1), dtype=np.float32), make_state())

    def test_output_moments_match_affine(self):
        st = make_state(c=3, eps=1e-7)
        st.gamma = np.array([1.5, 0.5, 2.0], dtype=np.float32)
        st.alpha = np.array([0.0, 1.0, -1.0], dtype=np.float32)
        rng = np.random.default_rng(1)
        x = rng.normal(3.0, 2.0, size=(32, 3, 8, 8)).astype(np.float32)
        out = bn_forward_train(x, st)
        mean, var = T.channel_moments(out)
        assert np.abs(mean - st.alpha).max() < 1e-4
        assert np.abs(np.sqrt(var) - st.gamma).max() < 1e-4


class TestBnSource:
    def test_centered_input_returns_alpha(self):
        st = make_state(source_mean=[2.0], source_var=[4.0])
        st.alpha = np.array([7.0], dtype=np.float32)
        x = np.full((3, 1, 2, 2), 2.0, dtype=np.float32)
        out = bn_forward_source(x, st)
        assert np.allclose(out, 7.0, atol=1e-6)

    def test_hand_value(self):
        st = make_state(source_mean=[0.0], source_var=[4.0])
        x = np.array([2.0], dtype=np.float32).reshape(1, 1, 1, 1)
        out = bn_forward_source(x, st)
        assert np.allclose(out.ravel(), [1.0], atol=1e-6)

    def test_state_untouched(self):
        st = make_state(source_mean=[1.0], source_var=[2.0])
        before = (st.source_mean.copy(), st.source_var.copy(),
                  st.target_mean.copy(), st.target_var.copy())
        x = np.random.default_rng(0).normal(size=(4, 1, 3, 3)).astype(np.float32)
        a = bn_forward_source(x, st)
        b = bn_forward_source(x, st)
        assert np.array_equal(a, b)
        assert np.array_equal(st.source_mean, before[0])
        assert np.array_equal(st.source_var, before[1])
        assert np.array_equal(st.target_mean, before[2])
        assert np.array_equal(st.target_var, before[3])


class TestNetworkSpec:
    def test_bad_task(self):
        with pytest.raises(ConfigurationError):
            NetworkSpec(task="regression").validate()

    def test_model_has_bn_after_every_conv(self):
        from fusionbn.layers import BatchNorm, Conv, Dense, PixelHead

        for task in ("classification", "dense-prediction"):
            model = build_model(NetworkSpec(task=task), seed=0)
            for i, layer in enumerate(model.layers):
                if isinstance(layer, Conv):
                    assert isinstance(model.layers[i + 1], BatchNorm)
            head = model.layers[-1]
            assert isinstance(head, (Dense, PixelHead))

    def test_eval_forward_is_pure(self):
        model = build_model(NetworkSpec(input_size=16), seed=0)
        x = np.random.default_rng(0).uniform(0, 1, size=(4, 3, 16, 16)).astype(np.float32)
        a = model.forward_eval(x, source_apply)
        b = model.forward_eval(x, source_apply)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# training


def blob_dataset(n=120, size=16, seed=0):
    """Linearly separable toy data: the two classes differ in mean pixel
    intensity, far beyond the noise. Exactly balanced so held-out moments
    are free of class-mix sampling noise."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(2), (n + 1) // 2)[:n])
    base = np.where(labels[:, None, None, None] == 0, 0.3, 0.7)
    images = (base + rng.normal(0, 0.05, size=(n, 3, size, size))).astype(np.float32)
    images = np.clip(images, 0, 1)
    return CenterDataset(
        center_id="toy",
        task="classification",
        images=images,
        labels=labels,
        masks=None,
        seed=seed,
        transform=StainTransform.identity(),
    )


def logistic_regression_accuracy(images, labels, steps=400, lr=0.5):
    """Independent oracle: plain logistic regression on mean intensity."""
    x = images.reshape(images.shape[0], -1).mean(axis=1, keepdims=True)
    x = np.concatenate([x, np.ones_like(x)], axis=1)
    w = np.zeros(2)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x @ w)))
        w -= lr * x.T @ (p - labels) / len(labels)
    return ((x @ w > 0).astype(int) == labels).mean()


class TestTrain:
    def test_separable_blobs(self):
        ds = blob_dataset()
        assert logistic_regression_accuracy(ds.images, ds.labels) == 1.0

        spec = NetworkSpec(channels=(8, 16), input_size=16)
        model = build_model(spec, seed=1)
        recipe = TrainRecipe(epochs=5, lr=0.05, batch_size=16, decay_epochs=(4,),
                             augment="none")
        train(model, ds, recipe, seed=1)
        probs = model.predict_proba(ds.images, source_apply)
        pred = probs.argmax(axis=1)
        from fusionbn.metrics import balanced_accuracy

        assert balanced_accuracy(pred, ds.labels) > 0.95

    def test_zero_lr_keeps_parameters(self):
        ds = blob_dataset(n=40)
        spec = NetworkSpec(channels=(4,), input_size=16)
        model = build_model(spec, seed=2)
        before = [p.value.copy() for p in model.params()]
        train(model, ds, TrainRecipe(epochs=1, lr=0.0, batch_size=8, augment="none"),
              seed=0)
        for p, b in zip(model.params(), before):
            assert np.array_equal(p.value, b)

    def test_same_seed_bit_identical(self):
        ds = blob_dataset(n=60)
        spec = NetworkSpec(channels=(4, 8), input_size=16)
        recipe = TrainRecipe(epochs=2, lr=0.01, batch_size=16)
        runs = []
        for _ in range(2):
            model = build_model(spec, seed=3)
            train(model, ds, recipe, seed=11)
            runs.append([p.value.copy() for p in model.params()])
        for a, b in zip(*runs):
            assert np.array_equal(a, b)

    def test_weight_decay_exact_shrink(self):
        # zero data gradient: constant-zero inputs + relu clamp keep all
        # gradients at zero, so the conv weight shrinks by (1 - lr*wd)
        from fusionbn.layers import Conv

        rng = np.random.default_rng(0)
        conv = Conv(1, 2, rng)
        w0 = conv.weight.value.copy()
        lr, wd = 0.1, 0.01
        opt = SGDM(conv.params(), conv.decayed_params(), lr=lr, weight_decay=wd)
        steps = 5
        for _ in range(steps):
            conv.weight.grad = np.zeros_like(conv.weight.value)
            opt.step()
        expected = w0.copy()
        for _ in range(steps):
            expected *= np.float32(1.0 - lr * wd)
        assert np.array_equal(conv.weight.value, expected)

    def test_source_stats_track_source_distribution(self):
        ds = blob_dataset(n=200)
        spec = NetworkSpec(channels=(8,), input_size=16)
        model = build_model(spec, seed=4)
        train(model, ds, TrainRecipe(epochs=14, lr=0.02, batch_size=32,
                                     decay_epochs=(8,), augment="none"), seed=4)
        # post-BN moments on held-out source data stay near (alpha, gamma^2)
        st = model.bn_states()[0]
        captured = {}

        def capture(state, x):
            y = bn_forward_source(x, state)
            captured["moments"] = T.channel_moments(y)
            return y

        hold = blob_dataset(n=200, seed=99)
        model.forward_eval(hold.images, capture)
        mean, var = captured["moments"]
        assert np.abs(mean - st.alpha).max() < 0.1
        assert np.abs(var - st.gamma.astype(np.float64) ** 2).max() < 0.1

    def test_paper_preset_values(self):
        r = RECIPES["paper"]
        assert r.epochs == 55
        assert r.lr == 0.001
        assert r.batch_size == 64
        assert r.weight_decay == 0.01
        assert r.decay_factor == 0.1
