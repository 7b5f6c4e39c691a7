import numpy as np
import pytest

from dgcnn import graph
from dgcnn import tensor as T
from dgcnn import verify as V


@pytest.mark.parametrize("family", ["permutation", "translation", "pointnet", "knn", "mlp"])
def test_family_passes(family):
    results = V.run_suite([family], seed=1)
    assert results and all(r.passed for r in results), V.format_table(results)


def test_unknown_family():
    with pytest.raises(ValueError):
        V.run_suite(["nope"])


def test_knn_family_catches_tie_fault():
    graph.set_tie_fault(True)
    try:
        results = V.run_suite(["knn"])
    finally:
        graph.set_tie_fault(False)
    assert not all(r.passed for r in results)


def test_kink_detection():
    relu_sum = lambda x: T.sum_over_axis(T.relu(x), 0)
    assert not V.kink_free(relu_sum, np.array([0.5, 5e-5]), 1e-4)
    assert V.kink_free(relu_sum, np.array([0.5, -0.3]), (1e-5, 1e-4))
    first_max = lambda x: T.max_over_axis(x, 0)[0]
    assert not V.kink_free(first_max, np.array([1.0, 1.0 + 1e-5]), 1e-4)


def test_gradient_family_catches_wrong_derivative(monkeypatch):
    def skewed_exp(a):
        out = np.exp(a.data)
        return T._emit("exp", (a,), out, lambda g: (g * out * 1.001,))

    monkeypatch.setattr(T, "exp", skewed_exp)
    results = {r.name: r for r in V.gradient_checks(seeds=2)}
    assert not results["exp"].passed
    assert results["matmul (left)"].passed and results["relu"].passed


def test_table_lists_every_result():
    results = V.run_suite(["pointnet"])
    table = V.format_table(results).splitlines()
    assert table[0].split()[:3] == ["family", "check", "result"]
    assert len(table) == len(results) + 1
