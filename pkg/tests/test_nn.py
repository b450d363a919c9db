import numpy as np
import pytest

from fedadapt.errors import ConfigError, DimensionError, NumericError
from fedadapt.nn import (DenseLayer, GradientSet, LayerGrads, ProximalSpec,
                         SplitModel, flatten, flatten_grads, forward,
                         loss_and_grad, model_shape, new_model, sgd_step,
                         softmax, unflatten)


def naive_forward(model, batch):
    """Oracle: triple-loop matrix products, independent of the numpy path."""
    h = [list(row) for row in batch]
    for layer in list(model.encoder) + [model.classifier]:
        out = []
        for row in h:
            new_row = []
            for o in range(layer.out_dim):
                acc = layer.bias[o]
                for i in range(layer.in_dim):
                    acc += layer.weight[o][i] * row[i]
                if layer.activation == "relu" and acc < 0:
                    acc = 0.0
                new_row.append(acc)
            out.append(new_row)
        h = out
    return np.asarray(h)


def make_model(seed=42, input_dim=3, hidden=(4,), n_classes=3):
    return new_model(input_dim, hidden, n_classes, seed)


class TestForward:
    def test_identity_encoder_passes_batch_through(self):
        layer = DenseLayer(weight=np.eye(2), bias=np.zeros(2), activation="linear")
        clf = DenseLayer(weight=np.zeros((3, 2)), bias=np.zeros(3), activation="linear")
        model = SplitModel(encoder=(layer,), classifier=clf)
        batch = np.array([[1.5, -2.0], [0.25, 4.0]])
        features, logits = forward(model, batch)
        assert np.array_equal(features, batch)
        assert np.array_equal(logits, np.zeros((2, 3)))

    def test_zero_classifier_gives_zero_logits(self):
        model = make_model()
        zero_clf = DenseLayer(weight=np.zeros_like(model.classifier.weight),
                              bias=np.zeros_like(model.classifier.bias),
                              activation="linear")
        model = SplitModel(encoder=model.encoder, classifier=zero_clf)
        _, logits = forward(model, np.ones((5, 3)))
        assert np.array_equal(logits, np.zeros((5, 3)))

    def test_matches_naive_matmul_oracle(self):
        model = new_model(4, (6, 5), 3, seed=42)
        batch = np.random.default_rng(7).normal(size=(8, 4))
        _, logits = forward(model, batch)
        expected = naive_forward(model, batch)
        assert np.max(np.abs(logits - expected)) < 1e-10

    def test_shape_mismatch_names_layer(self):
        model = make_model()
        with pytest.raises(DimensionError):
            forward(model, np.ones((2, 5)))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        probs = softmax(rng.normal(scale=30.0, size=(50, 7)))
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


def fd_gradient(loss_fn, model, step=1e-5):
    """Central finite differences over the flattened parameter vector."""
    shape = model_shape(model)
    theta = flatten(model)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        plus = theta.copy()
        plus[k] += step
        minus = theta.copy()
        minus[k] -= step
        grad[k] = (loss_fn(unflatten(plus, shape)) - loss_fn(unflatten(minus, shape))) / (2 * step)
    return grad


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7)
    return np.max(np.abs(a - b) / denom)


class TestLossAndGrad:
    def test_zero_lambda_is_plain_ce(self):
        model = make_model()
        anchor = make_model(seed=13)
        x = np.random.default_rng(1).normal(size=(6, 3))
        y = np.array([0, 1, 2, 0, 1, 2])
        loss_plain, g_plain = loss_and_grad(model, x, y)
        loss_reg, g_reg = loss_and_grad(model, x, y, reg=ProximalSpec(0.0, anchor))
        assert loss_plain == loss_reg
        assert np.array_equal(flatten_grads(g_plain), flatten_grads(g_reg))

    def test_anchor_equal_model_contributes_zero_penalty(self):
        model = make_model()
        x = np.random.default_rng(2).normal(size=(4, 3))
        y = np.array([0, 1, 2, 1])
        loss_plain, _ = loss_and_grad(model, x, y)
        loss_reg, _ = loss_and_grad(model, x, y, reg=ProximalSpec(5.0, model))
        assert loss_reg == pytest.approx(loss_plain, abs=1e-15)

    def test_gradients_match_finite_differences(self):
        model = new_model(3, (4,), 2, seed=11)
        x = np.random.default_rng(3).normal(size=(5, 3))
        y = np.array([0, 1, 0, 1, 1])
        _, grads = loss_and_grad(model, x, y)

        def loss_fn(m):
            return loss_and_grad(m, x, y)[0]

        assert rel_err(flatten_grads(grads), fd_gradient(loss_fn, model)) < 1e-4

    def test_regularized_gradients_match_finite_differences(self):
        model = new_model(3, (4,), 2, seed=11)
        anchor = new_model(3, (4,), 2, seed=12)
        x = np.random.default_rng(4).normal(size=(5, 3))
        y = np.array([0, 1, 0, 1, 1])
        reg = ProximalSpec(0.7, anchor)
        _, grads = loss_and_grad(model, x, y, reg=reg)

        def loss_fn(m):
            return loss_and_grad(m, x, y, reg=reg)[0]

        assert rel_err(flatten_grads(grads), fd_gradient(loss_fn, model)) < 1e-4

    def test_out_of_range_label_rejected(self):
        model = make_model(n_classes=3)
        with pytest.raises(ConfigError):
            loss_and_grad(model, np.ones((2, 3)), np.array([0, 3]))
        with pytest.raises(ConfigError):
            loss_and_grad(model, np.ones((2, 3)), np.array([0, -1]))


class TestSgdStep:
    def test_zero_gradient_leaves_model_bit_exact(self):
        model = make_model()
        zero = GradientSet(
            encoder=tuple(LayerGrads(np.zeros_like(l.weight), np.zeros_like(l.bias))
                          for l in model.encoder),
            classifier=LayerGrads(np.zeros_like(model.classifier.weight),
                                  np.zeros_like(model.classifier.bias)),
        )
        stepped = sgd_step(model, zero, eta=0.5)
        assert np.array_equal(flatten(stepped), flatten(model))

    def test_arithmetic_identity(self):
        layer = DenseLayer(weight=np.array([[2.0]]), bias=np.zeros(1), activation="linear")
        model = SplitModel(encoder=(), classifier=layer)
        grads = GradientSet(encoder=(), classifier=LayerGrads(np.array([[0.5]]), np.zeros(1)))
        stepped = sgd_step(model, grads, eta=1.0)
        assert stepped.classifier.weight[0, 0] == 1.5

    def test_quadratic_descent_matches_closed_form(self):
        # loss(p) = a (p - c)^2, grad = 2 a (p - c); stable for eta < 1/a.
        a, c, eta = 2.0, 3.0, 0.2
        p = 10.0
        model = SplitModel(encoder=(), classifier=DenseLayer(
            weight=np.array([[p]]), bias=np.zeros(1), activation="linear"))
        losses = [a * (p - c) ** 2]
        for k in range(10):
            g = 2 * a * (model.classifier.weight[0, 0] - c)
            grads = GradientSet(encoder=(), classifier=LayerGrads(np.array([[g]]), np.zeros(1)))
            model = sgd_step(model, grads, eta)
            value = model.classifier.weight[0, 0]
            expected = c + (1 - 2 * a * eta) ** (k + 1) * (p - c)
            assert value == pytest.approx(expected, rel=1e-12)
            losses.append(a * (value - c) ** 2)
        assert all(l1 < l0 for l0, l1 in zip(losses, losses[1:]))

    def test_non_finite_gradient_aborts(self):
        model = make_model()
        bad = GradientSet(
            encoder=tuple(LayerGrads(np.zeros_like(l.weight), np.zeros_like(l.bias))
                          for l in model.encoder),
            classifier=LayerGrads(np.full_like(model.classifier.weight, np.nan),
                                  np.zeros_like(model.classifier.bias)),
        )
        with pytest.raises(NumericError):
            sgd_step(model, bad, eta=0.1)


class TestFlatten:
    @pytest.mark.parametrize("hidden,n_classes", [((4,), 3), ((6, 5), 2), ((), 4)])
    def test_round_trip_is_bit_exact(self, hidden, n_classes):
        model = new_model(3, hidden, n_classes, seed=5)
        rebuilt = unflatten(flatten(model), model_shape(model))
        assert np.array_equal(flatten(rebuilt), flatten(model))
        for a, b in zip(list(model.encoder) + [model.classifier],
                        list(rebuilt.encoder) + [rebuilt.classifier]):
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
            assert a.activation == b.activation

    def test_length_mismatch_rejected(self):
        model = make_model()
        with pytest.raises(DimensionError):
            unflatten(flatten(model)[:-1], model_shape(model))

    def test_canonical_order(self):
        enc = DenseLayer(weight=np.array([[1.0, 2.0], [3.0, 4.0]]),
                         bias=np.array([5.0, 6.0]), activation="relu")
        clf = DenseLayer(weight=np.array([[7.0, 8.0]]), bias=np.array([9.0]),
                         activation="linear")
        model = SplitModel(encoder=(enc,), classifier=clf)
        assert flatten(model).tolist() == [1, 2, 3, 4, 5, 6, 7, 8, 9]


class TestInvariants:
    def test_gradient_check_over_seeds(self):
        # Covers relu hidden layers, the linear head, and the anchored loss.
        for seed in range(25):
            rng = np.random.default_rng(seed)
            model = new_model(3, (4,), 3, seed=seed)
            anchor = new_model(3, (4,), 3, seed=seed + 1000)
            x = rng.normal(size=(4, 3))
            y = rng.integers(0, 3, size=4)
            for reg in (None, ProximalSpec(0.3, anchor)):
                _, grads = loss_and_grad(model, x, y, reg=reg)
                fd = fd_gradient(lambda m: loss_and_grad(m, x, y, reg=reg)[0], model)
                assert rel_err(flatten_grads(grads), fd) < 1e-4

    def test_deterministic_initialization(self):
        a = new_model(5, (8, 4), 6, seed=99)
        b = new_model(5, (8, 4), 6, seed=99)
        assert np.array_equal(flatten(a), flatten(b))
        c = new_model(5, (8, 4), 6, seed=100)
        assert not np.array_equal(flatten(a), flatten(c))

    def test_classifier_must_be_linear(self):
        clf = DenseLayer(weight=np.zeros((2, 2)), bias=np.zeros(2), activation="relu")
        with pytest.raises(ConfigError):
            SplitModel(encoder=(), classifier=clf)

    def test_encoder_chain_validated(self):
        l1 = DenseLayer(weight=np.zeros((4, 3)), bias=np.zeros(4), activation="relu")
        l2 = DenseLayer(weight=np.zeros((2, 5)), bias=np.zeros(2), activation="relu")
        clf = DenseLayer(weight=np.zeros((2, 2)), bias=np.zeros(2), activation="linear")
        with pytest.raises(DimensionError):
            SplitModel(encoder=(l1, l2), classifier=clf)
