import math

import numpy as np
import pytest

from kan_symreg.data import prepare
from kan_symreg.kan import LossSpec, fit_domains, forward, init_network
from kan_symreg.lbfgs import lbfgs_minimize
from kan_symreg.train import (
    TABLE3,
    KanHyperParams,
    count_edges,
    fit,
    prune,
    total_loss,
    train_two_stage,
)


def toy_data(seed=0, n=200, d=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, d))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    return prepare(X, y, [f"x{i + 1}" for i in range(d)], ["y"], seed)


# -- loss -------------------------------------------------------------------


def test_zero_lambda_loss_is_mse():
    net = init_network([3, 4, 1], (5, 3), seed=1)
    rng = np.random.default_rng(0)
    X, Y = rng.uniform(size=(30, 3)), rng.normal(size=(30, 1))
    mse = np.mean((forward(net, X) - Y) ** 2)
    assert abs(total_loss(net, X, Y, lam=0.0, lam_entropy=5.0) - mse) < 1e-12


def test_perfect_predictions_zero_loss():
    net = init_network([2, 1], (5, 3), seed=1)
    X = np.random.default_rng(0).uniform(size=(10, 2))
    assert total_loss(net, X, forward(net, X)) == 0.0


def test_entropy_of_two_equal_edges_is_log2():
    # two parallel identity-like edges with equal output std
    net = init_network([2, 1], (5, 1), seed=0)
    layer = net.layers[0]
    layer.w_base[:] = 0.0
    layer.coef[:] = np.linspace(0, 1, layer.basis.n_basis)  # linear splines: the identity
    X = np.random.default_rng(0).uniform(size=(50, 1)).repeat(2, axis=1)
    Y = forward(net, X)
    no_ent = total_loss(net, X, Y, lam=1.0, lam_entropy=0.0)
    with_ent = total_loss(net, X, Y, lam=1.0, lam_entropy=1.0)
    assert abs((with_ent - no_ent) - math.log(2)) < 1e-9


# -- optimiser --------------------------------------------------------------


def test_lbfgs_quadratic():
    c = np.array([1.0, -2.0, 3.5, 0.25])
    trace = []
    theta = lbfgs_minimize(lambda t: np.sum((t - c) ** 2), lambda t: 2 * (t - c), np.zeros(4),
                           max_steps=50, trace=trace)
    assert np.max(np.abs(theta - c)) < 1e-8
    assert len(trace) <= 50


def test_lbfgs_rosenbrock():
    def f(t):
        return (1 - t[0]) ** 2 + 100 * (t[1] - t[0] ** 2) ** 2

    def g(t):
        return np.array([-2 * (1 - t[0]) - 400 * t[0] * (t[1] - t[0] ** 2), 200 * (t[1] - t[0] ** 2)])

    trace = []
    theta = lbfgs_minimize(f, g, np.array([-1.2, 1.0]), max_steps=200, trace=trace)
    assert np.max(np.abs(theta - 1.0)) < 1e-4
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_lbfgs_zero_steps_returns_start():
    t0 = np.array([0.3, -0.7])
    out = lbfgs_minimize(lambda t: float(t @ t), lambda t: 2 * t, t0, max_steps=0)
    assert np.array_equal(out, t0)
    assert out is not t0


def test_lbfgs_rejects_non_finite_start():
    with pytest.raises(ValueError):
        lbfgs_minimize(lambda t: np.nan, lambda t: t, np.zeros(2))


def test_lbfgs_returns_best_seen_on_nonsmooth_objective():
    # |t| has no useful curvature; the result must never be worse than the start
    t0 = np.array([0.37, -1.3])
    out = lbfgs_minimize(lambda t: float(np.abs(t).sum()), np.sign, t0, max_steps=30)
    assert np.abs(out).sum() <= np.abs(t0).sum()


# -- pruning ----------------------------------------------------------------


def test_dead_hidden_node_is_removed():
    net = init_network([2, 3, 1], (5, 3), seed=2)
    X = np.random.default_rng(0).uniform(size=(60, 2))
    fit_domains(net, X)
    first = net.layers[0]
    first.coef[1] = 0.0
    first.w_base[1] = 0.0
    pruned = prune(net, X)
    assert pruned.width[0] == 2 and pruned.width[-1] == 1
    assert pruned.width[1] == 2
    # nodes 0 and 2 survive with their first-layer parameters
    np.testing.assert_array_equal(pruned.layers[0].w_base, net.layers[0].w_base[[0, 2]] * pruned.layers[0].mask)
    assert count_edges(pruned) <= count_edges(net) - 3


def test_zero_threshold_is_a_no_op():
    net = init_network([2, 3, 1], (5, 3), seed=2)
    X = np.random.default_rng(0).uniform(size=(60, 2))
    pruned = prune(net, X, threshold=0.0)
    assert pruned.width == net.width
    np.testing.assert_array_equal(pruned.get_params(), net.get_params())


def test_prune_empty_batch():
    net = init_network([2, 3, 1])
    with pytest.raises(ValueError):
        prune(net, np.zeros((0, 2)))


@pytest.fixture(scope="module")
def trained_751():
    data = toy_data(seed=3, n=300, d=7)
    net = fit_domains(init_network([7, 5, 1], (5, 3), seed=3), data.X_train)
    fit(net, data.X_train, data.Y_train, LossSpec(1e-3, 10.0, "EFSU"), 1.0, 100)
    return net, data


def test_strict_prune_is_a_subnetwork(trained_751):
    net, data = trained_751
    before = net.get_params().copy()
    forward(net, data.X_train)
    pruned = prune(net, data.X_train, fold_offsets=False)
    np.testing.assert_array_equal(net.get_params(), before)  # input network untouched
    assert pruned.width[0] == 7 and pruned.width[-1] == 1
    old0, new0 = net.layers[0], pruned.layers[0]
    for j in range(new0.n_out):
        live = new0.mask[j] > 0
        # each surviving node is some original node with its live edges untouched
        matches = [h for h in range(old0.n_out) if np.array_equal(old0.coef[h][live], new0.coef[j][live])
                   and np.array_equal(old0.w_base[h][live], new0.w_base[j][live])]
        assert len(matches) == 1
        h = matches[0]
        live_out = pruned.layers[1].mask[:, j] > 0
        np.testing.assert_array_equal(pruned.layers[1].coef[live_out, j], net.layers[1].coef[live_out, h])
        assert np.all(new0.coef[j][~live] == 0)


def test_prune_output_change_is_small(trained_751):
    net, data = trained_751
    pruned = prune(net, data.X_train)
    rmse = np.sqrt(np.mean((forward(pruned, data.X_train) - forward(net, data.X_train)) ** 2))
    assert rmse < 10 * 1e-2 * data.Y_train.std()
    # every surviving node keeps its mean activation
    np.testing.assert_allclose(forward(pruned, data.X_train).mean(), forward(net, data.X_train).mean(), atol=1e-12)


@pytest.mark.slow
def test_pruning_rate_on_two_relevant_inputs():
    """7 -> 5 -> 1 trained on a target that uses x1, x2 only; observed rate 10/10."""
    hits = 0
    for seed in range(10):
        data = toy_data(seed=seed, n=300, d=7)
        hp = KanHyperParams(depth=1, grid=5, k=3, steps=100, lam=1e-3, lam_entropy=10.0,
                            reg_metric="EFSU", seed=seed, hidden_width=5)
        _, report = train_two_stage(data, hp)
        hits += report.pruned_nodes >= 1
    assert hits >= 8


# -- two-stage training -------------------------------------------------------


def test_hyperparams_defaults_and_ranges():
    hp = KanHyperParams()
    assert hp.width(7, 1) == [7, 15, 1]
    assert KanHyperParams(depth=2, hidden_width=4).width(3, 2) == [3, 4, 4, 2]
    for row in TABLE3.values():
        assert row.in_table2_ranges()
    assert not KanHyperParams(grid=11).in_table2_ranges()
    assert not KanHyperParams(lam=2e-3).in_table2_ranges()


def test_zero_steps_returns_initial_network():
    data = toy_data()
    hp = KanHyperParams(depth=1, grid=4, k=2, steps=0, seed=5, hidden_width=3)
    net, report = train_two_stage(data, hp)
    ref = fit_domains(init_network([2, 3, 1], (4, 2), seed=5), data.X_train)
    pruned = prune(ref, data.X_train)
    assert net.width == pruned.width
    np.testing.assert_array_equal(net.get_params(), pruned.get_params())
    np.testing.assert_array_equal(forward(net, data.X_test), forward(pruned, data.X_test))
    assert len(report.loss_trace) == 1


def test_zero_steps_and_no_pruning_equals_init(monkeypatch):
    import kan_symreg.train as T

    monkeypatch.setattr(T, "PRUNE_THRESHOLD", 0.0)
    monkeypatch.setattr(T, "prune", lambda net, X, threshold=0.0, fold_offsets=True: net.copy())
    data = toy_data()
    hp = KanHyperParams(depth=1, grid=4, k=2, steps=0, seed=5, hidden_width=3)
    net, _ = T.train_two_stage(data, hp)
    ref = fit_domains(init_network([2, 3, 1], (4, 2), seed=5), data.X_train)
    np.testing.assert_array_equal(net.get_params(), ref.get_params())


def test_training_is_deterministic_and_improves():
    data = toy_data()
    hp = KanHyperParams(depth=1, grid=5, k=3, steps=25, seed=1, hidden_width=4)
    net1, r1 = train_two_stage(data, hp)
    net2, r2 = train_two_stage(data, hp)
    assert r1.loss_trace == r2.loss_trace
    np.testing.assert_array_equal(net1.get_params(), net2.get_params())
    assert r1.loss_trace[-1] < r1.loss_trace[0]
    assert r1.spline_r2[0] > 0.95
    assert 0 < r1.stage_boundary < len(r1.loss_trace)


def test_report_serialisation(tmp_path):
    data = toy_data()
    _, report = train_two_stage(data, KanHyperParams(steps=5, grid=3, k=2, hidden_width=2))
    report.to_json(tmp_path / "r.json")
    report.trace_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == len(report.loss_trace) + 1
