import numpy as np
import pytest

from kan_symreg.data import prepare
from kan_symreg.fnn import (
    TABLE1,
    FnnConfig,
    FnnModel,
    fnn_forward,
    fnn_train,
    init_model,
    loss_and_grad,
)


def fd_worst(model, X, Y, n_params, rng, h=1e-5):
    loss, grads = loss_and_grad(model, X, Y)
    g = np.concatenate([a.ravel() for a in grads])
    theta = model.flat()
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    worst = 0.0
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        model.set_flat(tp)
        fp = loss_and_grad(model, X, Y)[0]
        model.set_flat(tm)
        fm = loss_and_grad(model, X, Y)[0]
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-7))
    model.set_flat(theta)
    return worst, len(idx)


def test_gradient_on_ten_parameter_net():
    model = init_model([1, 3, 1], seed=3)  # 3 + 3 + 3 + 1 = 10 parameters
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(25, 1)), rng.normal(size=(25, 1))
    worst, n = fd_worst(model, X, Y, 10, rng)
    assert n == 10
    assert worst < 1e-4


def test_gradient_wide_net():
    model = init_model([5, 16, 8, 2], seed=1)
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(30, 5)), rng.normal(size=(30, 2))
    worst, n = fd_worst(model, X, Y, 250, rng)
    assert n == 250 and worst < 1e-4


def test_zero_model_outputs_zero():
    model = init_model([3, 4, 2], seed=0)
    model.set_flat(np.zeros(model.flat().size))
    assert np.all(fnn_forward(model, np.ones((5, 3))) == 0)


def test_single_identity_layer():
    model = FnnModel([np.eye(3)], [np.zeros(3)])
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(fnn_forward(model, X), X)


def test_relu_hidden_and_linear_output():
    model = FnnModel([np.array([[1.0, -1.0]]), np.array([[1.0], [1.0]])], [np.zeros(2), np.array([-0.5])])
    np.testing.assert_allclose(fnn_forward(model, np.array([[2.0], [-3.0]])).ravel(), [1.5, 2.5])


def test_inference_has_no_dropout():
    model = init_model([3, 20, 1], seed=0, dropout_rate=0.5)
    X = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(fnn_forward(model, X), fnn_forward(model, X))
    a = fnn_forward(model, X, training=True, rng=np.random.default_rng(1))
    assert not np.array_equal(a, fnn_forward(model, X))


def test_inverted_dropout_preserves_expectation():
    model = init_model([2, 50, 1], seed=0, dropout_rate=0.3)
    X = np.random.default_rng(0).uniform(size=(1, 2))
    rng = np.random.default_rng(2)
    draws = np.array([fnn_forward(model, X, training=True, rng=rng)[0, 0] for _ in range(4000)])
    # output is linear in the dropped hidden layer, so the mean is unbiased
    assert abs(draws.mean() - fnn_forward(model, X)[0, 0]) < 4 * draws.std() / np.sqrt(draws.size)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        fnn_forward(init_model([3, 2, 1]), np.zeros((2, 4)))


def test_he_uniform_bounds():
    model = init_model([50, 40, 1], seed=0)
    assert np.abs(model.weights[0]).max() <= np.sqrt(6 / 50)
    assert np.abs(model.weights[1]).max() <= np.sqrt(6 / 40)
    assert all(np.all(b == 0) for b in model.biases)


def linear_data(n=300, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    return prepare(x[:, None], 3 * x + 1, ["x"], ["y"], seed)


def test_learns_a_line():
    model, report = fnn_train(linear_data(), FnnConfig([8], epochs=200, batch_size=8, learning_rate=1e-3, seed=0))
    assert report.test_r2[0] > 0.999
    assert report.loss_trace[-1] < report.loss_trace[0]
    assert len(report.loss_trace) == 200


def test_zero_epochs_is_initialisation():
    data = linear_data()
    model, report = fnn_train(data, FnnConfig([8], epochs=0, seed=4))
    ref = init_model([1, 8, 1], rng=np.random.default_rng(4))
    np.testing.assert_array_equal(model.flat(), ref.flat())
    assert report.loss_trace == []


def test_training_is_bit_deterministic():
    data = linear_data()
    cfg = FnnConfig([6, 4], epochs=5, batch_size=7, dropout=True, dropout_rate=0.2, seed=9)
    a, ra = fnn_train(data, cfg)
    b, rb = fnn_train(data, cfg)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert ra.loss_trace == rb.loss_trace


def test_non_finite_loss_aborts():
    data = linear_data()
    data.Y_train = data.Y_train.copy()
    data.Y_train[3] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 0"):
        fnn_train(data, FnnConfig([4], epochs=2, batch_size=300))


def test_config_validation_and_table():
    with pytest.raises(ValueError):
        FnnConfig(batch_size=0)
    with pytest.raises(ValueError):
        FnnConfig(dropout_rate=1.0)
    heat = TABLE1["HEAT"]
    assert heat.hidden_nodes == [251, 184, 47] and heat.batch_size == 8 and heat.learning_rate == 0.000882
    assert FnnConfig.from_dict({"hidden_nodes": [3], "extra": 1}).hidden_nodes == [3]


def test_checkpoint_round_trip(tmp_path):
    model = init_model([3, 5, 2], seed=2, dropout_rate=0.1)
    model.save(tmp_path / "f.json")
    back = FnnModel.load(tmp_path / "f.json")
    assert back.dims == [3, 5, 2] and back.dropout_rate == 0.1
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(fnn_forward(back, X), fnn_forward(model, X))
