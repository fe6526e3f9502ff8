"""Layer kit, Adam, early stopping, and an end-to-end XOR sanity check."""

import math

import numpy as np
import pytest

from labeldep import autodiff as ad
from labeldep.cvae import bernoulli_loglik
from labeldep.nn import Adam, DenseLayer, EarlyStopper, Mlp, MlpSpec, glorot_bound


class TestInit:
    def test_single_layer_bounds_and_zero_bias(self):
        spec = MlpSpec([4, 3])
        mlp = Mlp.init(spec, np.random.default_rng(11))
        bound = glorot_bound(4, 3)  # sqrt(6/7) ~ 0.9258
        assert math.isclose(bound, math.sqrt(6 / 7))
        w = mlp.layers[0].weight
        assert w.shape == (4, 3) and w.size == 12
        assert np.all(np.abs(w) < bound)
        np.testing.assert_array_equal(mlp.layers[0].bias, 0.0)

    def test_same_seed_identical(self):
        a = Mlp.init(MlpSpec([3, 5, 2]), np.random.default_rng(7))
        b = Mlp.init(MlpSpec([3, 5, 2]), np.random.default_rng(7))
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_parameter_count(self):
        mlp = Mlp.init(MlpSpec([2, 5, 1]), np.random.default_rng(0))
        assert mlp.parameter_count() == 2 * 5 + 5 + 5 * 1 + 1 == 21

    def test_glorot_bound_holds_per_layer(self):
        mlp = Mlp.init(MlpSpec([7, 13, 4, 2]), np.random.default_rng(5))
        for layer in mlp.layers:
            fan_in, fan_out = layer.weight.shape
            assert np.all(np.abs(layer.weight) < glorot_bound(fan_in, fan_out))

    @pytest.mark.parametrize(
        "widths", [[0, 3], [4], [3, -1], []], ids=["zero", "one-width", "negative", "empty"]
    )
    def test_bad_widths_rejected(self, widths):
        with pytest.raises(ValueError):
            MlpSpec(widths)

    def test_bad_activations_and_keep_prob(self):
        with pytest.raises(ValueError):
            MlpSpec([2, 2], hidden_activation="gelu")
        with pytest.raises(ValueError):
            MlpSpec([2, 2], output_activation="tanh")
        with pytest.raises(ValueError):
            MlpSpec([2, 2], keep_prob=0.0)


class TestForward:
    def test_identity_initialized_layer(self):
        mlp = Mlp(MlpSpec([3, 3]), [DenseLayer(np.eye(3), np.zeros(3))])
        x = np.random.default_rng(1).standard_normal((4, 3))
        tape = ad.Tape()
        out = mlp.forward(tape, tape.leaf(x))
        np.testing.assert_array_equal(out.value, x)

    def test_keep_prob_one_train_equals_eval(self):
        mlp = Mlp.init(MlpSpec([4, 8, 2], keep_prob=1.0), np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal((5, 4))
        tape = ad.Tape()
        train_out = mlp.forward(tape, tape.leaf(x), train=True, dropout_rng=np.random.default_rng(0))
        tape2 = ad.Tape()
        eval_out = mlp.forward(tape2, tape2.leaf(x))
        np.testing.assert_array_equal(train_out.value, eval_out.value)

    def test_forward_np_matches_tape_forward(self):
        mlp = Mlp.init(MlpSpec([4, 6, 3], output_activation="sigmoid"), np.random.default_rng(4))
        x = np.random.default_rng(5).standard_normal((7, 4))
        tape = ad.Tape()
        np.testing.assert_array_equal(mlp.forward(tape, tape.leaf(x)).value, mlp.forward_np(x))

    def test_dropout_preserves_expectation(self):
        # one hidden layer: the output is linear in the masked activations, so
        # the mask average must converge to the eval output (MC error only)
        mlp = Mlp.init(MlpSpec([4, 16, 3], keep_prob=0.8), np.random.default_rng(6))
        x_row = np.random.default_rng(7).standard_normal(4)
        n_masks = 100_000
        x = np.tile(x_row, (n_masks, 1))  # independent mask per row
        tape = ad.Tape()
        out = mlp.forward(tape, tape.leaf(x), train=True, dropout_rng=np.random.default_rng(8))
        mc = out.value.mean(axis=0)
        expected = mlp.forward_np(x_row[None, :])[0]
        np.testing.assert_allclose(mc, expected, rtol=0.01)

    def test_dropout_requires_rng_in_train_mode(self):
        mlp = Mlp.init(MlpSpec([2, 4, 1], keep_prob=0.5), np.random.default_rng(9))
        tape = ad.Tape()
        with pytest.raises(ValueError, match="rng"):
            mlp.forward(tape, tape.leaf(np.zeros((1, 2))), train=True)

    def test_input_width_mismatch(self):
        mlp = Mlp.init(MlpSpec([3, 2]), np.random.default_rng(10))
        tape = ad.Tape()
        with pytest.raises(ad.ShapeError):
            mlp.forward(tape, tape.leaf(np.zeros((1, 4))))


class TestAdam:
    def test_single_step_hand_value(self):
        # theta=0, g=1, t=1: m_hat=1, v_hat=1 -> theta' = -lr / (1 + eps)
        p = np.zeros(1)
        adam = Adam([p], learning_rate=1e-3)
        adam.step([np.ones(1)])
        expected = -1e-3 / (1.0 + 1e-8)
        assert abs(p[0] - expected) < 1e-15

    def test_zero_gradient_leaves_parameters(self):
        p = np.array([1.0, -2.0])
        adam = Adam([p], learning_rate=0.1)
        adam.step([np.zeros(2)])
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_determinism_across_instances(self):
        rng = np.random.default_rng(12)
        base = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(5)]
        p1, p2 = base.copy(), base.copy()
        a1, a2 = Adam([p1], learning_rate=0.01), Adam([p2], learning_rate=0.01)
        for g in grads:
            a1.step([g])
            a2.step([g])
        np.testing.assert_array_equal(p1, p2)

    def test_zero_learning_rate_is_identity(self):
        p = np.array([3.0])
        Adam([p], learning_rate=0.0).step([np.array([5.0])])
        assert p[0] == 3.0

    def test_nan_gradient_aborts_without_state_change(self):
        p = np.array([1.0])
        adam = Adam([p], learning_rate=0.1)
        with pytest.raises(ad.NumericError, match="non-finite gradient"):
            adam.step([np.array([np.nan])])
        assert adam.t == 0 and p[0] == 1.0

    def test_gradient_count_mismatch(self):
        adam = Adam([np.zeros(2)])
        with pytest.raises(ValueError):
            adam.step([])


class TestEarlyStopper:
    def test_decreasing_never_stops(self):
        stopper = EarlyStopper(patience=10)
        assert not any(stopper.update(loss) for loss in np.linspace(5.0, 0.1, 50))

    def test_constant_stops_after_patience_plus_one(self):
        stopper = EarlyStopper(patience=3)
        outcomes = [stopper.update(2.0) for _ in range(4)]
        assert outcomes == [False, False, False, True]  # stops at epoch 4

    def test_traced_counter(self):
        # improvements at 5, 4, 3 with one blip at 6: never reaches patience 2
        stopper = EarlyStopper(patience=2)
        assert [stopper.update(v) for v in [5.0, 4.0, 6.0, 3.0]] == [False] * 4

    def test_sub_threshold_improvement_does_not_reset(self):
        stopper = EarlyStopper(patience=2, min_improvement=1e-6)
        stopper.update(1.0)
        assert not stopper.update(1.0 - 1e-9)
        assert stopper.update(1.0 - 2e-9)

    def test_non_finite_loss_rejected(self):
        with pytest.raises(ValueError):
            EarlyStopper(patience=1).update(float("nan"))


def test_xor_training_sanity():
    """A 2-layer tanh MLP fits XOR to BCE < 0.05 within 5000 full-batch steps."""
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([[0.0], [1.0], [1.0], [0.0]])
    mlp = Mlp.init(MlpSpec([2, 8, 1], hidden_activation="tanh"), np.random.default_rng(21))
    adam = Adam(mlp.parameters(), learning_rate=1e-2)
    loss_value = math.inf
    for _ in range(5000):
        tape = ad.Tape()
        logits = mlp.forward(tape, tape.leaf(x))
        loss = ad.negate(ad.reduce_mean(bernoulli_loglik(y, logits)))
        loss_value = float(loss.value)
        if loss_value < 0.04:
            break
        tape.backward(loss)
        adam.step(mlp.gradients(tape))
    assert loss_value < 0.05
