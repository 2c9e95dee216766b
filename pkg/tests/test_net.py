import math

import numpy as np
import pytest
from sklearn.base import clone

from specml import net
from specml.errors import EmptySet, InvalidConfig, ShapeMismatch, StaleCache
from fdcheck import assert_grad_close, central_diff


def tiny_net(seed=0, input_dim=6, n_classes=3):
    """Under 500 parameters, covers relu, identity, and both dropout gaps."""
    return net.build_classifier(input_dim, n_classes, encoder_hidden=(8,),
                                head_hidden=(8, 6), seed=seed)


def random_problem(rng, n=5, input_dim=6, n_classes=3):
    x = rng.standard_normal((n, input_dim))
    y = (rng.random((n, n_classes)) < 0.5).astype(float)
    return x, y


def kink_safe_problem(network, rng, n=5, margin=1e-3, mode="eval"):
    """Draw inputs whose ReLU pre-activations all clear ``margin``.

    Central differences are meaningless within h of a ReLU kink, so inputs
    that land a pre-activation near zero are redrawn.
    """
    relu_layers = [i for i, l in enumerate(network.layers) if l.activation == "relu"]
    for _ in range(50):
        x, y = random_problem(rng, n=n, input_dim=network.input_dim,
                              n_classes=network.output_dim)
        _, cache = network.forward(x, mode=mode)
        if min(np.abs(cache.preacts[i]).min() for i in relu_layers) > margin:
            return x, y
    raise AssertionError("could not find a kink-safe input")


class TestForward:
    def test_zero_parameters_give_half_probabilities(self):
        network = tiny_net()
        for p in network.parameters():
            p[...] = 0.0
        logits, _ = network.forward(np.ones((2, 6)), mode="eval")
        np.testing.assert_array_equal(logits, 0.0)
        np.testing.assert_allclose(net.predict_proba(network, np.ones((2, 6))), 0.5)

    def test_eval_is_deterministic(self):
        network = tiny_net(seed=1)
        x = np.random.default_rng(0).standard_normal((4, 6))
        a, _ = network.forward(x, mode="eval")
        b, _ = network.forward(x, mode="eval")
        np.testing.assert_array_equal(a, b)

    def test_single_linear_layer_is_a_matmul(self):
        layer = net.LayerDef(3, 4, "identity", 0.0)
        network = net.Network([layer], n_encoder_layers=0, seed=2)
        x = np.random.default_rng(1).standard_normal((5, 3))
        logits, _ = network.forward(x, mode="eval")
        expected = x @ network.weights[0] + network.biases[0]
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            tiny_net().forward(np.zeros((2, 7)))

    def test_dimension_chaining_validated(self):
        with pytest.raises(InvalidConfig):
            net.Network([net.LayerDef(3, 4), net.LayerDef(5, 2)], 0)


class TestBceLoss:
    def test_zero_logits_give_log_two(self):
        logits = np.zeros((3, 4))
        targets = (np.random.default_rng(2).random((3, 4)) < 0.5).astype(float)
        assert net.bce_loss(logits, targets) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_logits_vanish(self):
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])
        logits = np.where(targets == 1.0, 20.0, -20.0)
        assert net.bce_loss(logits, targets) <= 1e-8

    def test_matches_naive_elementwise_loop(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((3, 4)) * 3
        targets = (rng.random((3, 4)) < 0.5).astype(float)
        total = 0.0
        for i in range(3):
            for j in range(4):
                p = 1.0 / (1.0 + math.exp(-logits[i, j]))
                total -= targets[i, j] * math.log(p) + (1 - targets[i, j]) * math.log(1 - p)
        assert net.bce_loss(logits, targets) == pytest.approx(total / 12, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(EmptySet):
            net.bce_loss(np.zeros((0, 3)), np.zeros((0, 3)))


class TestBackward:
    def test_finite_difference_eval_mode(self):
        # A slice of the 50-seed acceptance sweep, kept quick here.
        for seed in range(6):
            rng = np.random.default_rng(seed)
            network = tiny_net(seed=seed)
            assert net.count_params(network) <= 500
            x, y = kink_safe_problem(network, rng)
            logits, cache = network.forward(x, mode="eval")
            grads, input_grad = network.backward(cache, net.bce_loss_grad(logits, y))

            def value():
                out, _ = network.forward(x, mode="eval")
                return net.bce_loss(out, y)

            for param, grad in zip(network.parameters(), grads):
                assert_grad_close(grad, central_diff(value, param),
                                  rel=1e-4, abs_tol=1e-7)
            assert_grad_close(input_grad, central_diff(value, x),
                              rel=1e-4, abs_tol=1e-7)

    def test_finite_difference_through_dropout(self):
        # Reseeding the dropout generator before every forward pass makes
        # train mode a deterministic function, so the masks differentiate.
        network = tiny_net(seed=7)
        rng = np.random.default_rng(7)
        x, y = kink_safe_problem(network, rng)

        def fresh_forward():
            network.reseed_dropout(123)
            out, cache = network.forward(x, mode="train")
            return out, cache

        logits, cache = fresh_forward()
        grads, _ = network.backward(cache, net.bce_loss_grad(logits, y))

        def value():
            out, _ = fresh_forward()
            return net.bce_loss(out, y)

        for param, grad in zip(network.parameters(), grads):
            assert_grad_close(grad, central_diff(value, param),
                              rel=1e-4, abs_tol=1e-7)

    def test_zero_upstream_gives_zero_gradients(self):
        network = tiny_net(seed=3)
        x, _ = random_problem(np.random.default_rng(4))
        logits, cache = network.forward(x, mode="eval")
        grads, input_grad = network.backward(cache, np.zeros_like(logits))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(input_grad == 0)

    def test_duplicated_sample_doubles_contribution(self):
        # Two-batch comparison: with mean reduction, N_b * grad_b sums the
        # per-sample contributions, so 3*g([a,a,b]) = 2*g([a,b]) + g([a]).
        network = tiny_net(seed=5)
        rng = np.random.default_rng(6)
        a = rng.standard_normal((1, 6))
        b = rng.standard_normal((1, 6))
        ya = (rng.random((1, 3)) < 0.5).astype(float)
        yb = (rng.random((1, 3)) < 0.5).astype(float)

        def grads_of(x, y):
            logits, cache = network.forward(x, mode="eval")
            grads, _ = network.backward(cache, net.bce_loss_grad(logits, y))
            return grads

        g_dup = grads_of(np.vstack([a, a, b]), np.vstack([ya, ya, yb]))
        g_pair = grads_of(np.vstack([a, b]), np.vstack([ya, yb]))
        g_single = grads_of(a, ya)
        for gd, gp, gs in zip(g_dup, g_pair, g_single):
            np.testing.assert_allclose(3 * gd, 2 * gp + gs, atol=1e-12)

    def test_stale_cache_rejected(self):
        network = tiny_net(seed=8)
        x, y = random_problem(np.random.default_rng(8))
        logits, cache = network.forward(x, mode="eval")
        grads, _ = network.backward(cache, net.bce_loss_grad(logits, y))
        network.apply_gradients(net.Adam(lr=0.01), grads)
        with pytest.raises(StaleCache):
            network.backward(cache, net.bce_loss_grad(logits, y))


class TestDropout:
    def test_eval_mode_is_identity(self):
        network = tiny_net(seed=9)
        x = np.random.default_rng(9).standard_normal((3, 6))
        _, cache = network.forward(x, mode="eval")
        assert all(m is None for m in cache.masks)

    def test_inverted_dropout_preserves_expectation(self):
        # Mean activation over 10^4 masks must match the eval activation
        # within 2% relative.
        rate = 0.4
        layer = net.LayerDef(4, 16, "relu", rate)
        network = net.Network([layer], 0, seed=10)
        x = np.abs(np.random.default_rng(10).standard_normal((1, 4))) + 0.5
        eval_out, _ = network.forward(x, mode="eval")
        total = np.zeros_like(eval_out)
        for _ in range(10_000):
            out, _ = network.forward(x, mode="train")
            total += out
        ratio = total.mean() / (10_000 * eval_out.mean())
        assert abs(ratio - 1.0) <= 0.02

    def test_train_masks_recorded_and_reused(self):
        network = tiny_net(seed=11)
        x, y = random_problem(np.random.default_rng(11))
        logits, cache = network.forward(x, mode="train")
        masked = [m for m in cache.masks if m is not None]
        assert len(masked) == 2          # one per head gap
        grads_a, _ = network.backward(cache, net.bce_loss_grad(logits, y))
        grads_b, _ = network.backward(cache, net.bce_loss_grad(logits, y))
        for ga, gb in zip(grads_a, grads_b):
            np.testing.assert_array_equal(ga, gb)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = np.array([1.5, -2.0])
        adam = net.Adam(lr=0.1)
        adam.step([p], [np.zeros(2)])
        np.testing.assert_array_equal(p, [1.5, -2.0])

    def test_first_step_magnitude(self):
        # Oracle: one step of the update formula by hand.
        # m=0.1, v=0.001, mhat=1, vhat=1 -> delta = lr/(1+eps)
        p = np.array([0.0])
        adam = net.Adam(lr=0.1)
        adam.step([p], [np.array([1.0])])
        expected = -0.1 * 1.0 / (1.0 + 1e-8)
        assert p[0] == pytest.approx(expected, abs=1e-15)
        assert adam.t == 1

    def test_two_steps_match_hand_trace(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g = 2.0
        m = v = 0.0
        theta = 1.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        p = np.array([1.0])
        adam = net.Adam(lr=lr)
        adam.step([p], [np.array([g])])
        adam.step([p], [np.array([g])])
        assert p[0] == pytest.approx(theta, abs=1e-14)

    def test_trainable_mask_skips_entries(self):
        p0, p1 = np.array([1.0]), np.array([1.0])
        adam = net.Adam(lr=0.1)
        adam.step([p0, p1], [np.array([1.0]), np.array([1.0])],
                  trainable=[True, False])
        assert p0[0] != 1.0 and p1[0] == 1.0


class TestSchedulers:
    def test_plateau_monotone_improvement_keeps_lr(self):
        sched = net.ReduceLROnPlateau(1.0, patience=2, factor=0.1)
        for loss in (1.0, 0.9, 0.8):
            lr = sched.step(loss)
        assert lr == 1.0

    def test_plateau_fires_after_two_flat_epochs(self):
        sched = net.ReduceLROnPlateau(1.0, patience=2, factor=0.1)
        lrs = [sched.step(1.0) for _ in range(4)]
        assert lrs == [1.0, 1.0, pytest.approx(0.1), pytest.approx(0.1)]

    def test_plateau_counter_resets_after_improvement(self):
        sched = net.ReduceLROnPlateau(1.0, patience=2, factor=0.1)
        for loss in (1.0, 1.0, 1.0):      # reduction fires here
            sched.step(loss)
        assert sched.lr == pytest.approx(0.1)
        sched.step(0.5)                   # improvement resets the counter
        sched.step(0.6)
        assert sched.lr == pytest.approx(0.1)   # only one non-improving epoch

    def test_early_stopping_patience(self):
        stopper = net.EarlyStopping(patience=5)
        assert stopper.step(1.0) is True
        for i in range(5):
            assert stopper.step(1.0) is False
        assert stopper.should_stop

    def test_early_stopping_reset_on_improvement(self):
        stopper = net.EarlyStopping(patience=2)
        stopper.step(1.0)
        stopper.step(1.0)
        stopper.step(0.5)
        assert not stopper.should_stop


class TestTrain:
    def _dataset(self, seed=0, n=96, input_dim=6, n_classes=3):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, input_dim))
        w = rng.standard_normal((input_dim, n_classes))
        y = (x @ w >= 0).astype(float)
        return x, y

    def test_frozen_validation_loss_stops_after_six_epochs(self):
        # lr=0 freezes the parameters, so validation loss never improves
        # past epoch 1 and early stopping fires at 1 + patience.
        x, y = self._dataset()
        network = tiny_net(seed=1)
        config = net.TrainConfig(batch_size=32, max_epochs=100,
                                 early_stop_patience=5, initial_lr=0.0, seed=0)
        result = net.train(network, x, y, x[:16], y[:16], config)
        assert len(result.history) == 6
        assert result.stopped_early
        assert result.best_epoch == 1

    def test_runs_max_epochs_when_improving(self):
        x, y = self._dataset(seed=1)
        network = tiny_net(seed=2)
        config = net.TrainConfig(batch_size=32, max_epochs=5, seed=0)
        result = net.train(network, x, y, x[:16], y[:16], config)
        if all(r.improved for r in result.history):
            assert len(result.history) == 5
            assert not result.stopped_early

    def test_best_epoch_weights_restored(self):
        x, y = self._dataset(seed=2)
        network = tiny_net(seed=3)
        config = net.TrainConfig(batch_size=16, max_epochs=12, seed=4)
        result = net.train(network, x, y, x[:24], y[:24], config)
        best = min(r.val_loss for r in result.history)
        assert result.best_val_loss == pytest.approx(best)
        logits, _ = result.net.forward(x[:24], mode="eval")
        assert net.bce_loss(logits, y[:24]) == pytest.approx(best, abs=1e-12)

    def test_determinism(self):
        x, y = self._dataset(seed=3)
        results = []
        for _ in range(2):
            network = tiny_net(seed=5)
            config = net.TrainConfig(batch_size=16, max_epochs=6, seed=6)
            results.append(net.train(network, x, y, x[:16], y[:16], config))
        assert results[0].history == results[1].history
        for a, b in zip(results[0].net.parameters(), results[1].net.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_frozen_encoder_untouched_by_training(self):
        x, y = self._dataset(seed=4)
        network = tiny_net(seed=7)
        net.freeze_encoder(network)
        before = [network.weights[i].copy() for i in range(network.n_encoder_layers)]
        config = net.TrainConfig(batch_size=16, max_epochs=4, seed=8)
        result = net.train(network, x, y, x[:16], y[:16], config)
        for i, snapshot in enumerate(before):
            np.testing.assert_array_equal(result.net.weights[i], snapshot)

    def test_frozen_except_first_layer(self):
        x, y = self._dataset(seed=5)
        network = net.build_classifier(6, 3, encoder_hidden=(8, 8),
                                       head_hidden=(8, 6), seed=9)
        net.freeze_encoder(network, keep_first_trainable=True)
        first_before = network.weights[0].copy()
        second_before = network.weights[1].copy()
        config = net.TrainConfig(batch_size=16, max_epochs=3, seed=10)
        net.train(network, x, y, x[:16], y[:16], config)
        assert not np.array_equal(network.weights[0], first_before)
        np.testing.assert_array_equal(network.weights[1], second_before)

    def test_softcon_pretrain_runs_and_moves_encoder(self):
        rng = np.random.default_rng(11)
        x4 = rng.standard_normal((40, 3, 2, 2))
        y = (rng.random((40, 4)) < 0.5).astype(float)
        network = net.build_classifier(12, 4, encoder_hidden=(8,),
                                       head_hidden=(8, 6), seed=12)
        init_encoder = network.weights[0].copy()
        config = net.TrainConfig(batch_size=16, max_epochs=2, seed=13,
                                 loss_mode="softcon_pretrain", pretrain_epochs=3)
        result = net.train(network, x4, y, x4[:8], y[:8], config)
        assert len(result.pretrain_history) == 3
        assert all(math.isfinite(v) for v in result.pretrain_history)
        assert not np.array_equal(result.net.weights[0], init_encoder)

    def test_softcon_pretrain_needs_rasters(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((20, 12))
        y = (rng.random((20, 4)) < 0.5).astype(float)
        network = net.build_classifier(12, 4, encoder_hidden=(8,),
                                       head_hidden=(8, 6), seed=13)
        config = net.TrainConfig(loss_mode="softcon_pretrain", seed=0)
        with pytest.raises(ShapeMismatch):
            net.train(network, x, y, x[:4], y[:4], config)

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            net.TrainConfig(plateau_factor=1.5).validate()
        with pytest.raises(InvalidConfig):
            net.TrainConfig(batch_size=0).validate()
        with pytest.raises(InvalidConfig):
            net.TrainConfig(loss_mode="other").validate()


class TestSizeAndCheckpoint:
    def test_linear_layer_parameter_count(self):
        network = net.Network([net.LayerDef(3, 4, "identity")], 0, seed=0)
        assert net.count_params(network) == 16    # 3*4 weights + 4 biases

    def test_reduced_input_saves_exactly_the_first_layer_difference(self):
        wide = net.build_classifier(13, 9, seed=0)
        narrow = net.build_classifier(3, 9, seed=0)
        assert net.count_params(wide) - net.count_params(narrow) == (13 - 3) * 256
        assert net.count_params(narrow) < net.count_params(wide)

    def test_checkpoint_round_trip(self, tmp_path):
        network = tiny_net(seed=14)
        path = tmp_path / "model.net1"
        net.save_network(network, path)
        loaded, adam = net.load_network(path)
        assert adam is None
        assert net.count_params(loaded) == net.count_params(network)
        assert net.model_size_bytes(loaded) == net.model_size_bytes(network)
        for a, b in zip(loaded.parameters(), network.parameters()):
            np.testing.assert_array_equal(a, b)
        assert [l.dropout for l in loaded.layers] == [l.dropout for l in network.layers]
        assert loaded.n_encoder_layers == network.n_encoder_layers

    def test_checkpoint_with_optimizer_state(self, tmp_path):
        network = tiny_net(seed=15)
        x, y = np.ones((4, 6)), np.zeros((4, 3))
        logits, cache = network.forward(x, mode="eval")
        grads, _ = network.backward(cache, net.bce_loss_grad(logits, y))
        adam = net.Adam(lr=0.02)
        network.apply_gradients(adam, grads)
        path = tmp_path / "with_adam.net1"
        net.save_network(network, path, adam)
        _, restored = net.load_network(path)
        assert restored.t == 1
        assert restored.lr == 0.02
        for a, b in zip(restored.m, adam.m):
            np.testing.assert_array_equal(a, b)

    def test_model_size_is_params_plus_overhead(self):
        network = tiny_net(seed=16)
        overhead = 4 + 8 + len(network.layers) * 17 + 1
        assert net.model_size_bytes(network) == overhead + 8 * net.count_params(network)

    def test_trailing_bytes_rejected(self, tmp_path):
        network = tiny_net(seed=17)
        raw = net.serialize_network(network) + b"zz"
        with pytest.raises(InvalidConfig):
            net.deserialize_network(raw)

    def test_replace_first_layer(self):
        network = tiny_net(seed=18)
        net.replace_first_layer(network, 11, seed=1)
        assert network.input_dim == 11
        logits, _ = network.forward(np.zeros((2, 11)), mode="eval")
        assert logits.shape == (2, 3)


class TestMultiLabelMLPEstimator:
    def test_fit_predict_on_learnable_data(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((240, 8))
        w = rng.standard_normal((8, 3))
        y = (x @ w >= 0).astype(float)
        clf = net.MultiLabelMLP(encoder_hidden=(32,), head_hidden=(64, 32),
                                dropout=(0.2, 0.1), lr=3e-3, max_epochs=60,
                                batch_size=32, seed=0)
        clf.fit(x, y)
        pred = clf.predict(x)
        assert pred.shape == y.shape
        assert (pred == y).mean() > 0.9
        probs = clf.predict_proba(x)
        assert np.all((probs >= 0) & (probs <= 1))

    def test_explicit_validation_set(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((60, 5))
        y = (rng.random((60, 2)) < 0.5).astype(float)
        clf = net.MultiLabelMLP(encoder_hidden=(8,), head_hidden=(8, 4),
                                max_epochs=3, seed=1)
        clf.fit(x[:40], y[:40], X_val=x[40:], y_val=y[40:])
        assert len(clf.result_.history) <= 3

    def test_sklearn_protocol(self):
        clf = net.MultiLabelMLP(max_epochs=7, seed=3)
        params = clf.get_params()
        assert params["max_epochs"] == 7
        twin = clone(clf)
        assert twin.get_params() == params
        with pytest.raises(InvalidConfig):
            clf.predict(np.zeros((1, 4)))
