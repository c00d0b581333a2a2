import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedaudit import model as mdl
from fedaudit.errors import ConfigError, EmptySampleError, ParameterError, ShapeMismatchError
from fedaudit.numstat import RngStream
from helpers import finite_diff_grad

LINEAR = mdl.ModelSpec("linear_softmax", input_dim=3, num_classes=4, init_std=0.1)
MLP = mdl.ModelSpec("mlp", input_dim=3, hidden_dim=5, num_classes=4, init_std=0.1)


def random_case(seed, spec):
    g = RngStream(seed).generator()
    params = 0.5 * g.standard_normal(spec.param_count())
    sample = mdl.LabeledSample(g.standard_normal(spec.input_dim), int(g.integers(spec.num_classes)))
    return params, sample


class TestModelSpec:
    def test_param_counts(self):
        assert LINEAR.param_count() == 4 * 3 + 4
        assert MLP.param_count() == 5 * 3 + 5 + 4 * 5 + 4

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            mdl.ModelSpec("perceptron", input_dim=3)
        with pytest.raises(ConfigError):
            mdl.ModelSpec("mlp", input_dim=3, hidden_dim=0)
        with pytest.raises(ConfigError):
            mdl.ModelSpec("linear_softmax", input_dim=3, hidden_dim=2)
        with pytest.raises(ConfigError):
            mdl.ModelSpec("linear_softmax", input_dim=3, num_classes=1)


class TestInit:
    def test_zero_std_all_zero(self):
        spec = mdl.ModelSpec("mlp", input_dim=3, hidden_dim=5, num_classes=4, init_std=0.0)
        assert np.array_equal(mdl.init_params(spec, RngStream(1)), np.zeros(spec.param_count()))

    def test_deterministic(self):
        rng = RngStream(7).derive(3)
        assert np.array_equal(mdl.init_params(MLP, rng), mdl.init_params(MLP, rng))

    def test_distinct_streams_differ(self):
        root = RngStream(7)
        vecs = [mdl.init_params(MLP, root.derive(i)) for i in range(10)]
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.any(vecs[i] != vecs[j])

    def test_biases_zero(self):
        params = mdl.init_params(LINEAR, RngStream(1))
        assert np.array_equal(params[4 * 3 :], np.zeros(4))


class TestLoss:
    def test_uniform_at_zero_params(self):
        params = np.zeros(LINEAR.param_count())
        for seed in range(5):
            _, sample = random_case(seed, LINEAR)
            assert mdl.loss(LINEAR, params, sample) == pytest.approx(math.log(4), abs=1e-12)

    def test_ln2_binary(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=2, num_classes=2)
        sample = mdl.LabeledSample(np.array([0.3, -0.7]), 1)
        assert mdl.loss(spec, np.zeros(spec.param_count()), sample) == pytest.approx(
            0.693147, abs=1e-6
        )

    def test_strong_separation_drives_loss_to_zero(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=2, num_classes=2)
        # weight row of the true class points along x with a huge margin
        params = np.array([50.0, 0.0, -50.0, 0.0, 0.0, 0.0])
        sample = mdl.LabeledSample(np.array([1.0, 0.0]), 0)
        assert 0.0 <= mdl.loss(spec, params, sample) < 1e-3

    def test_loss_nonnegative_and_capped(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=1, num_classes=2)
        params = np.array([1000.0, -1000.0, 0.0, 0.0])
        wrong = mdl.LabeledSample(np.array([1.0]), 1)
        val = mdl.loss(spec, params, wrong)
        assert 0.0 <= val <= -math.log(1e-30) + 1e-9

    def test_shape_error(self):
        with pytest.raises(ShapeMismatchError):
            mdl.loss(LINEAR, np.zeros(3), mdl.LabeledSample(np.zeros(3), 0))
        with pytest.raises(ShapeMismatchError):
            mdl.loss(LINEAR, np.zeros(LINEAR.param_count()), mdl.LabeledSample(np.zeros(5), 0))


class TestGradients:
    def test_linear_gradient_hand_value(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=2, num_classes=2)
        sample = mdl.LabeledSample(np.array([1.0, 0.0]), 0)
        grad = mdl.grad_sample(spec, np.zeros(spec.param_count()), sample)
        # softmax is uniform, so dlogits = [0.5 - 1, 0.5]; weight block is outer(dlogits, x)
        assert np.allclose(grad, [-0.5, 0.0, 0.5, 0.0, -0.5, 0.5], atol=1e-12)

    @pytest.mark.parametrize("spec", [LINEAR, MLP], ids=["linear", "mlp"])
    def test_finite_differences(self, spec):
        for seed in range(50):
            params, sample = random_case(seed, spec)
            analytic = mdl.grad_sample(spec, params, sample)
            numeric = finite_diff_grad(spec, params, sample)
            denom = max(np.linalg.norm(numeric), 1e-12)
            assert np.linalg.norm(analytic - numeric) / denom < 1e-4

    def test_gradient_at_converged_minimum(self):
        # plain GD on a separable toy set until the gradient vanishes
        spec = mdl.ModelSpec("linear_softmax", input_dim=1, num_classes=2)
        x = np.array([[-5.0], [5.0]])
        y = np.array([0, 1])
        params = np.zeros(spec.param_count())
        for _ in range(50_000):
            g = mdl.grad_batch(spec, params, x, y)
            if np.linalg.norm(g) < 1e-6:
                break
            params -= 1.0 * g
        assert np.linalg.norm(mdl.grad_batch(spec, params, x, y)) < 1e-6

    def test_batch_of_one_equals_grad_sample(self):
        params, sample = random_case(3, MLP)
        batch = mdl.grad_batch(MLP, params, sample.x[None, :], np.array([sample.y]))
        assert np.allclose(batch, mdl.grad_sample(MLP, params, sample), atol=1e-15)

    def test_duplicate_averaging(self):
        params, sample = random_case(4, LINEAR)
        x = np.stack([sample.x, sample.x])
        y = np.array([sample.y, sample.y])
        assert np.allclose(
            mdl.grad_batch(LINEAR, params, x, y),
            mdl.grad_sample(LINEAR, params, sample),
            atol=1e-15,
        )

    def test_batch_equals_mean_of_per_sample(self):
        g = RngStream(9).generator()
        x = g.standard_normal((20, 3))
        y = g.integers(4, size=20)
        params = 0.3 * g.standard_normal(MLP.param_count())
        direct = mdl.grad_samples(MLP, params, x, y).mean(axis=0)
        assert np.allclose(mdl.grad_batch(MLP, params, x, y), direct, atol=1e-12)

    def test_permutation_invariance(self):
        g = RngStream(10).generator()
        x = g.standard_normal((15, 3))
        y = g.integers(4, size=15)
        params = 0.3 * g.standard_normal(LINEAR.param_count())
        perm = g.permutation(15)
        a = mdl.grad_batch(LINEAR, params, x, y)
        b = mdl.grad_batch(LINEAR, params, x[perm], y[perm])
        assert np.allclose(a, b, atol=1e-12)

    def test_empty_batch(self):
        with pytest.raises(EmptySampleError):
            mdl.grad_batch(LINEAR, np.zeros(LINEAR.param_count()), np.zeros((0, 3)), np.zeros(0, dtype=int))


class TestSgd:
    def test_full_batch_single_epoch_is_one_gd_step_exact(self):
        # dyadic inputs and power-of-two lr: every term is exact in binary,
        # so the in-epoch shuffle cannot perturb the sum
        g = RngStream(11).generator()
        x = g.integers(-2, 3, size=(8, 3)) / 2.0
        y = np.asarray(g.integers(4, size=8))
        start = np.zeros(LINEAR.param_count())
        lr = 0.5
        out = mdl.sgd_epochs(LINEAR, start, x, y, lr, epochs=1, batch_size=8, rng=RngStream(12))
        assert np.array_equal(out, start - lr * mdl.grad_batch(LINEAR, start, x, y))

    def test_full_batch_single_epoch_is_one_gd_step_general(self):
        g = RngStream(21).generator()
        x = g.standard_normal((8, 3))
        y = np.asarray(g.integers(4, size=8))
        start = 0.1 * g.standard_normal(LINEAR.param_count())
        out = mdl.sgd_epochs(LINEAR, start, x, y, 0.3, epochs=1, batch_size=8, rng=RngStream(22))
        expect = start - 0.3 * mdl.grad_batch(LINEAR, start, x, y)
        assert np.allclose(out, expect, atol=1e-14, rtol=0)

    def test_lr_zero_rejected(self):
        with pytest.raises(ParameterError):
            mdl.sgd_epochs(LINEAR, np.zeros(LINEAR.param_count()), np.zeros((2, 3)),
                           np.zeros(2, dtype=int), 0.0, 1, 2, RngStream(1))

    def test_training_reduces_loss_on_separable_blobs(self):
        g = RngStream(13).generator()
        n = 60
        x = np.concatenate([g.normal(-2, 1, (n, 2)), g.normal(2, 1, (n, 2))])
        y = np.array([0] * n + [1] * n)
        spec = mdl.ModelSpec("linear_softmax", input_dim=2, num_classes=2)
        params = np.zeros(spec.param_count())
        losses = [float(mdl.loss_many(spec, params, x, y).mean())]
        for e in range(20):
            params = mdl.sgd_epochs(spec, params, x, y, 0.1, 1, 16, RngStream(14).derive(e))
            losses.append(float(mdl.loss_many(spec, params, x, y).mean()))
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert drops >= 0.9 * (len(losses) - 1)

    def test_reproducible(self):
        g = RngStream(15).generator()
        x = g.standard_normal((30, 3))
        y = g.integers(4, size=30)
        start = mdl.init_params(MLP, RngStream(16))
        a = mdl.sgd_epochs(MLP, start, x, y, 0.05, 3, 8, RngStream(17))
        b = mdl.sgd_epochs(MLP, start, x, y, 0.05, 3, 8, RngStream(17))
        assert np.array_equal(a, b)

    def test_input_params_not_mutated(self):
        g = RngStream(18).generator()
        x = g.standard_normal((10, 3))
        y = g.integers(4, size=10)
        start = mdl.init_params(LINEAR, RngStream(19))
        before = start.copy()
        mdl.sgd_epochs(LINEAR, start, x, y, 0.1, 1, 4, RngStream(20))
        assert np.array_equal(start, before)


class TestAccuracy:
    def test_zero_params_balanced_binary(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=2, num_classes=2)
        x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 2.0]])
        y = np.array([0, 1, 0, 1])
        # all-zero logits tie; argmax picks class 0
        assert mdl.accuracy(spec, np.zeros(spec.param_count()), x, y) == 0.5

    def test_hand_built_separator(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=1, num_classes=2)
        params = np.array([-1.0, 1.0, 0.0, 0.0])  # class 1 wins iff x > 0
        x = np.array([[-3.0], [-1.0], [1.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        assert mdl.accuracy(spec, params, x, y) == 1.0

    def test_all_labels_equal_predicted(self):
        spec = mdl.ModelSpec("linear_softmax", input_dim=2, num_classes=2)
        x = np.ones((5, 2))
        y = np.zeros(5, dtype=int)
        assert mdl.accuracy(spec, np.zeros(spec.param_count()), x, y) == 1.0

    def test_empty(self):
        with pytest.raises(EmptySampleError):
            mdl.accuracy(LINEAR, np.zeros(LINEAR.param_count()), np.zeros((0, 3)), np.zeros(0, dtype=int))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30)
def test_loss_nonnegative_property(seed):
    params, sample = random_case(seed, MLP)
    assert mdl.loss(MLP, params, sample) >= 0.0
