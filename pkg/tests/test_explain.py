import itertools
import math

import numpy as np
import pytest

from kan_symreg.explain import (
    BackgroundSet,
    ShapReport,
    background_size,
    exact_shapley,
    explain,
    kernel_shap,
    kernel_weight,
    kmeans_background,
    mean_abs_ranking,
    read_shap_summary,
    write_shap_summary,
    write_shap_values,
)


def brute_shapley(f, x, points, weights):
    """Textbook permutation average; independent of the subset code under test."""
    d = x.size

    def value(present):
        rows = np.array([[x[i] if i in present else b[i] for i in range(d)] for b in points])
        return float(np.dot(weights, f(rows)))

    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for perm in perms:
        present = set()
        for i in perm:
            before = value(present)
            present.add(i)
            phi[i] += value(present) - before
    return phi / len(perms)


def test_hand_example():
    bg = BackgroundSet(np.zeros((1, 3)), None)
    f = lambda X: X[:, 0] * X[:, 1] + X[:, 2]  # noqa: E731
    np.testing.assert_allclose(exact_shapley(f, np.ones(3), bg), [0.5, 0.5, 1.0], atol=1e-15)
    np.testing.assert_allclose(kernel_shap(f, np.ones(3), bg), [0.5, 0.5, 1.0], atol=1e-12)


def test_against_permutation_oracle():
    rng = np.random.default_rng(0)
    pts, w = rng.normal(size=(3, 4)), np.array([0.2, 0.5, 0.3])
    bg = BackgroundSet(pts, w)
    f = lambda X: np.sin(X[:, 0]) * X[:, 1] + X[:, 2] ** 2 - X[:, 3] * X[:, 0]  # noqa: E731
    x = rng.normal(size=4)
    np.testing.assert_allclose(exact_shapley(f, x, bg), brute_shapley(f, x, pts, w), atol=1e-12)


def test_constant_function():
    bg = BackgroundSet(np.random.default_rng(0).normal(size=(4, 5)), None)
    f = lambda X: np.full(X.shape[0], 2.5)  # noqa: E731
    assert np.all(np.abs(exact_shapley(f, np.ones(5), bg)) < 1e-15)
    assert np.all(np.abs(kernel_shap(f, np.ones(5), bg)) < 1e-12)


def test_linear_closed_form():
    rng = np.random.default_rng(1)
    w, b, x = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
    bg = BackgroundSet(b[None, :], None)
    f = lambda X: X @ w  # noqa: E731
    np.testing.assert_allclose(exact_shapley(f, x, bg), w * (x - b), atol=1e-12)
    np.testing.assert_allclose(kernel_shap(f, x, bg), w * (x - b), atol=1e-10)


def test_symmetry_and_null_player():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(4, 4))
    pts = np.vstack([base, base[:, [1, 0, 2, 3]]])  # symmetric in features 0 and 1
    bg = BackgroundSet(pts, None)
    f = lambda X: X[:, 0] * X[:, 1] + np.exp(X[:, 0]) + np.exp(X[:, 1]) + X[:, 2]  # noqa: E731
    x = np.array([0.7, 0.7, -0.3, 5.0])
    ex = exact_shapley(f, x, bg)
    ks = kernel_shap(f, x, bg)
    assert abs(ex[0] - ex[1]) < 1e-9 and abs(ks[0] - ks[1]) < 1e-9
    assert abs(ex[3]) < 1e-9 and abs(ks[3]) < 1e-6


def test_kernel_weight_example():
    assert kernel_weight(4, 1) == pytest.approx(0.25)
    assert kernel_weight(4, 2) == pytest.approx(3 / (6 * 2 * 2))


def test_exact_refuses_wide_inputs():
    bg = BackgroundSet(np.zeros((1, 21)), None)
    with pytest.raises(ValueError):
        exact_shapley(lambda X: X.sum(1), np.ones(21), bg)
    with pytest.raises(ValueError):
        kernel_shap(lambda X: X[:, 0], np.ones(1), BackgroundSet(np.zeros((1, 1)), None))


def test_sampled_kernel_shap_for_many_features():
    rng = np.random.default_rng(3)
    d = 17
    w, b, x = rng.normal(size=d), rng.normal(size=d), rng.normal(size=d)
    bg = BackgroundSet(b[None, :], None)
    phi, info = kernel_shap(lambda X: X @ w, x, bg, seed=1, return_info=True)
    assert not info.enumerated and info.n_coalitions == 2048 + 2 * d
    # additive f: the regression is exact even from sampled coalitions
    np.testing.assert_allclose(phi, w * (x - b), atol=1e-8)
    again = kernel_shap(lambda X: X @ w, x, bg, seed=1)
    np.testing.assert_array_equal(phi, again)


def test_multi_output_functions():
    rng = np.random.default_rng(4)
    bg = BackgroundSet(rng.normal(size=(3, 3)), None)
    f = lambda X: np.column_stack([X[:, 0] * X[:, 1], X[:, 2]])  # noqa: E731
    x = rng.normal(size=3)
    phi = exact_shapley(f, x, bg)
    assert phi.shape == (3, 2)
    np.testing.assert_allclose(kernel_shap(f, x, bg), phi, atol=1e-10)


def test_background_size_rule():
    assert background_size(1000, 7) == 35
    assert background_size(5000, 13) == 100
    assert background_size(100, 1) == 1  # 0.5 rounds up
    assert background_size(50, 1) == 1
    assert background_size(3, 1000) == 3


def test_kmeans_identical_rows():
    bg = kmeans_background(np.tile([[1.0, 2.0, 3.0]], (3, 1)), k=1)
    np.testing.assert_array_equal(bg.points, [[1.0, 2.0, 3.0]])
    assert bg.weights.tolist() == [1.0]


def test_kmeans_background_weights_and_determinism():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.05, (300, 2)), rng.normal(3, 0.05, (100, 2))])
    bg = kmeans_background(X, k=2, seed=5)
    order = np.argsort(bg.points[:, 0])
    np.testing.assert_allclose(bg.weights[order], [0.75, 0.25])
    np.testing.assert_allclose(bg.points[order], [[0, 0], [3, 3]], atol=0.02)
    bg2 = kmeans_background(X, k=2, seed=5)
    np.testing.assert_array_equal(bg.points, bg2.points)
    assert kmeans_background(np.random.default_rng(1).uniform(size=(1000, 7))).points.shape == (35, 7)
    with pytest.raises(ValueError):
        kmeans_background(np.zeros((0, 3)))


def report_with(values, names=("a", "b", "c")):
    return ShapReport(np.asarray(values, float)[None], np.zeros(1), list(names), ["y"])


def test_ranking_rules():
    assert mean_abs_ranking(report_with(np.zeros((4, 3))))["y"] == ["a", "b", "c"]
    vals = np.array([[1.0, -2.0, 1.0], [-1.0, 2.0, 1.0]])
    assert mean_abs_ranking(report_with(vals))["y"][0] == "b"
    scaled = mean_abs_ranking(report_with(vals * 7.3))
    assert scaled == mean_abs_ranking(report_with(vals))


def test_explain_local_accuracy_and_csv(tmp_path):
    rng = np.random.default_rng(6)
    X_train = rng.uniform(size=(200, 3))
    bg = kmeans_background(X_train)
    f = lambda X: np.tanh(X @ np.array([1.0, -2.0, 0.5])) + X[:, 0] * X[:, 2]  # noqa: E731
    X = rng.uniform(size=(12, 3))
    rep = explain(f, X, bg, ["p", "q", "r"])
    assert rep.values.shape == (1, 12, 3)
    assert np.max(np.abs(rep.values[0].sum(axis=1) + rep.base[0] - f(X))) < 1e-6
    assert mean_abs_ranking(rep)["y"][0] == "q"
    write_shap_values(rep, tmp_path / "v.csv")
    write_shap_summary(rep, tmp_path / "s.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "sample,output,feature,phi" and len(lines) == 1 + 12 * 3
    summary = read_shap_summary(tmp_path / "s.csv")
    assert [name for name, _ in summary["y"]] == ["p", "q", "r"]
    assert summary["y"][1][1] == pytest.approx(rep.mean_abs[0, 1], rel=1e-15)
    exact = explain(f, X, bg, method="exact")
    np.testing.assert_allclose(exact.values, rep.values, atol=1e-9)
    with pytest.raises(ValueError):
        explain(f, X, bg, method="lime")


def test_background_validation():
    with pytest.raises(ValueError):
        BackgroundSet(np.zeros((2, 2)), np.ones(3))
    bg = BackgroundSet(np.zeros((2, 2)), np.array([2.0, 6.0]))
    assert bg.weights.tolist() == [0.25, 0.75]
    assert math.isclose(bg.weights.sum(), 1.0)
