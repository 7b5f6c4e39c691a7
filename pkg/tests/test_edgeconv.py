import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcnn import tensor as T
from dgcnn.edgeconv import (
    Aggregation,
    EdgeConv,
    EdgeFunctionSpec,
    EdgeKind,
    aggregate,
    asym_edge_feature,
    edge_inputs,
    edgeconv_forward,
)
from dgcnn.errors import DimensionError, ParameterError
from dgcnn.graph import knn_graph, knn_indices
from dgcnn.tensor import Tensor

KINDS = [EdgeKind.GLOBAL_ONLY, EdgeKind.NEIGHBOR_ONLY, EdgeKind.NEIGHBOR_GAUSSIAN, EdgeKind.LOCAL_ONLY,
         EdgeKind.CENTRALIZED_ASYM, EdgeKind.PAIR_CONCAT]


def randomize_bn(conv, rng):
    for layer in conv.mlp:
        p = layer.params
        if p.has_bn:
            C = p.bn_gamma.shape[0]
            p.bn_gamma.data = rng.uniform(0.5, 1.5, C)
            p.bn_beta.data = rng.normal(0, 0.2, C)
            p.bn_running_mean.data = rng.normal(0, 0.3, C)
            p.bn_running_var.data = rng.uniform(0.5, 2.0, C)


def make_conv(kind, agg=Aggregation.MAX, in_features=3, widths=(6, 5), seed=0, **kw):
    rng = np.random.default_rng(seed)
    conv = EdgeConv(in_features, list(widths), rng, EdgeFunctionSpec(kind), agg, **kw)
    randomize_bn(conv, rng)
    return conv


def test_spec_validation():
    with pytest.raises(ParameterError):
        EdgeFunctionSpec(EdgeKind.NEIGHBOR_GAUSSIAN, gaussian_bandwidth=0.0)
    with pytest.raises(ValueError):
        EdgeFunctionSpec("nonsense")
    assert EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM).input_width(3) == 6
    assert EdgeFunctionSpec(EdgeKind.LOCAL_ONLY).input_width(3) == 3


def test_first_layer_width():
    assert make_conv(EdgeKind.CENTRALIZED_ASYM).mlp[0].params.weight.shape == (6, 6)
    assert make_conv(EdgeKind.NEIGHBOR_ONLY).mlp[0].params.weight.shape == (3, 6)


# ---------------------------------------------------------------- edge inputs


def test_centralized_self_edge():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    e = edge_inputs(x, np.array([[0], [1]]), EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM)).data
    assert e[:, 0].tolist() == [[1, 2, 0, 0], [3, 4, 0, 0]]


def test_local_only_hand_example():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    e = edge_inputs(x, np.array([[1], [0]]), EdgeFunctionSpec(EdgeKind.LOCAL_ONLY)).data
    assert e[0, 0].tolist() == [3, 4]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.tuples(*[st.integers(-16, 16)] * 3))
def test_local_only_translation_invariant(seed, shift):
    x = np.random.default_rng(seed).integers(-8, 8, size=(8, 3)).astype(np.float64)
    idx = knn_indices(x, 3)
    spec = EdgeFunctionSpec(EdgeKind.LOCAL_ONLY)
    t = np.asarray(shift, dtype=np.float64) / 4
    np.testing.assert_array_equal(edge_inputs(x, idx, spec).data, edge_inputs(x + t, idx, spec).data)


def test_edge_input_forms():
    x = np.array([[1.0], [2.0], [4.0]])
    idx = np.array([[1], [2], [0]])
    form = lambda kind: edge_inputs(x, idx, EdgeFunctionSpec(kind)).data[:, 0].tolist()
    assert form(EdgeKind.GLOBAL_ONLY) == [[1], [2], [4]]
    assert form(EdgeKind.NEIGHBOR_ONLY) == [[2], [4], [1]]
    assert form(EdgeKind.NEIGHBOR_GAUSSIAN) == [[2], [4], [1]]
    assert form(EdgeKind.LOCAL_ONLY) == [[1], [2], [-3]]
    assert form(EdgeKind.CENTRALIZED_ASYM) == [[1, 1], [2, 2], [4, -3]]
    assert form(EdgeKind.PAIR_CONCAT) == [[1, 2], [2, 4], [4, 1]]


def test_edge_inputs_size_mismatch():
    with pytest.raises(DimensionError):
        edge_inputs(np.zeros((3, 2)), np.zeros((4, 1), dtype=int), EdgeFunctionSpec())


# ---------------------------------------------------------------- forward


def test_global_only_is_pointwise_mlp():
    x = np.random.default_rng(1).normal(size=(9, 3))
    conv = make_conv(EdgeKind.GLOBAL_ONLY)
    expected = x
    for layer in conv.mlp:
        expected = layer(Tensor(expected)).data
    for materialize in (False, True):
        np.testing.assert_allclose(conv(x, knn_indices(x, 4), materialize=materialize).data, expected, atol=1e-12)


def test_self_loop_k1_is_mlp_of_x_and_zero():
    x = np.random.default_rng(2).normal(size=(6, 3))
    conv = make_conv(EdgeKind.CENTRALIZED_ASYM)
    out = conv(x, knn_indices(x, 1)).data
    h = Tensor(np.concatenate([x, np.zeros_like(x)], axis=1))
    for layer in conv.mlp:
        h = layer(h)
    np.testing.assert_allclose(out, h.data, atol=1e-12)


def line_conv(slope):
    conv = EdgeConv(1, [1], np.random.default_rng(0), EdgeFunctionSpec(EdgeKind.LOCAL_ONLY),
                    slope=slope, batch_norm=False, bias=False)
    conv.mlp[0].params.weight.data = np.array([[1.0]])
    return conv


def test_line_hand_enumeration():
    x = np.array([[0.0], [1.0], [3.0]])
    g = knn_graph(x, 2, self_loop=False)
    for fused in (True, False):
        assert line_conv(None)(x, g, fused=fused).data[:, 0].tolist() == [3, 2, -2]
        assert line_conv(0.0)(x, g, fused=fused).data[:, 0].tolist() == [3, 2, 0]


def test_gaussian_weights_edges():
    x = np.array([[0.0], [1.0]])
    conv = EdgeConv(1, [1], np.random.default_rng(0), EdgeFunctionSpec(EdgeKind.NEIGHBOR_GAUSSIAN, 2.0),
                    Aggregation.SUM, slope=None, batch_norm=False, bias=False)
    conv.mlp[0].params.weight.data = np.array([[1.0]])
    out = conv(x, np.array([[0, 1], [1, 0]])).data[:, 0]
    w = np.exp(-1.0 / 8.0)
    np.testing.assert_allclose(out, [0 + 1 * w, 1 + 0 * w])


def test_aggregate_examples():
    e = Tensor(np.array([[[1.0, 2.0], [5.0, 0.0]]]))
    assert aggregate(e, Aggregation.MAX).data.tolist() == [[5, 2]]
    assert aggregate(e, Aggregation.SUM).data.tolist() == [[6, 2]]
    one = Tensor(np.array([[[1.0, -2.0]], [[3.0, 4.0]]]))
    assert aggregate(one, Aggregation.MAX).data.tolist() == [[1, -2], [3, 4]]
    assert not aggregate(Tensor(np.zeros((3, 2, 4))), Aggregation.SUM).data.any()


def test_asym_edge_feature_examples():
    assert asym_edge_feature([2.0], [5.0], [[1.0]], [[0.5]]).tolist() == [4.0]
    rng = np.random.default_rng(0)
    xi, theta, phi = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    np.testing.assert_array_equal(asym_edge_feature(xi, xi, theta, phi), np.maximum(phi @ xi, 0))
    xj, t = rng.normal(size=3), np.array([0.5, -1.25, 2.0])
    zero = np.zeros_like(phi)
    np.testing.assert_allclose(asym_edge_feature(xi + t, xj + t, theta, zero),
                               asym_edge_feature(xi, xj, theta, zero), atol=1e-12)
    with pytest.raises(DimensionError):
        asym_edge_feature(xi, xj, theta, phi[:, :2])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_shared_mlp_matches_reference_form(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 3))
    idx = knn_indices(x, 4)
    conv = EdgeConv(3, [5], rng, EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM), slope=0.0,
                    batch_norm=False, bias=False)
    w = conv.mlp[0].params.weight.data
    phi, theta = w[:3].T, w[3:].T
    h = T.relu(conv.mlp[0].linear(edge_inputs(x, idx, conv.spec))).data
    for i in range(10):
        for r, j in enumerate(idx[i]):
            np.testing.assert_allclose(h[i, r], asym_edge_feature(x[i], x[j], theta, phi), atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("agg", [Aggregation.MAX, Aggregation.SUM])
def test_fused_factorized_materialized_agree(kind, agg):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 12, 3))
    idx = knn_indices(x, 5)
    conv = make_conv(kind, agg, seed=5)
    ref = conv(x, idx, materialize=True, fused=False).data
    for kw in ({}, {"fused": False}, {"materialize": True}):
        np.testing.assert_allclose(conv(x, idx, **kw).data, ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(KINDS))
def test_neighbor_row_shuffle_leaves_max_unchanged(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 3))
    idx = knn_indices(x, 5)
    shuffled = np.array([rng.permutation(row) for row in idx])
    conv = make_conv(kind, seed=seed % 1000)
    with T.strict_mode():
        a = conv(x, idx).data
        b = conv(x, shuffled).data
    np.testing.assert_array_equal(a, b)
    conv_sum = make_conv(kind, Aggregation.SUM, seed=seed % 1000)
    np.testing.assert_allclose(conv_sum(x, idx).data, conv_sum(x, shuffled).data, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(KINDS), st.sampled_from(list(Aggregation)))
def test_cloud_permutation_equivariance(seed, kind, agg):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(11, 3))
    perm = rng.permutation(11)
    g = knn_graph(x, 4)
    conv = make_conv(kind, agg, seed=seed % 1000)
    np.testing.assert_allclose(conv(x[perm], g.relabel(perm)).data, conv(x, g).data[perm], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_partial_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 3))
    g = knn_graph(x, 4)
    conv = EdgeConv(3, [6, 4], rng, EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM), batch_norm=False, bias=False)
    conv.mlp[0].params.weight.data[:3] = 0.0
    t = rng.uniform(-10, 10, size=3)
    np.testing.assert_allclose(conv(x + t, g).data, conv(x, g).data, atol=1e-9)


def test_global_only_ignores_graph():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 3))
    conv = make_conv(EdgeKind.GLOBAL_ONLY)
    a = rng.integers(0, 10, size=(10, 4))
    b = rng.integers(0, 10, size=(10, 4))
    np.testing.assert_allclose(conv(x, a, materialize=True).data, conv(x, b, materialize=True).data, atol=1e-12)


def test_sum_neighbor_only_on_grid_is_convolution():
    # A 3x3 image with a 4-neighbor stencil plus self: SUM over NEIGHBOR_ONLY with one
    # linear filter is a box convolution with zero padding (missing neighbors repeat self,
    # so those rows are compensated below).
    img = np.arange(9.0).reshape(3, 3)
    x = img.reshape(9, 1)
    idx = []
    for r in range(3):
        for c in range(3):
            row = [r * 3 + c]
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                row.append(rr * 3 + cc if 0 <= rr < 3 and 0 <= cc < 3 else -1)
            idx.append(row)
    idx = np.array(idx)
    valid = idx >= 0
    idx = np.where(valid, idx, np.arange(9)[:, None])
    conv = EdgeConv(1, [1], np.random.default_rng(0), EdgeFunctionSpec(EdgeKind.NEIGHBOR_ONLY), Aggregation.SUM,
                    slope=None, batch_norm=False, bias=False)
    conv.mlp[0].params.weight.data = np.array([[1.0]])
    out = conv(x, idx).data[:, 0] - (~valid).sum(axis=1) * x[:, 0]
    padded = np.pad(img, 1)
    stencil = padded[1:-1, 1:-1] + padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
    np.testing.assert_allclose(out, stencil.ravel())


def test_forward_width_mismatch():
    conv = make_conv(EdgeKind.LOCAL_ONLY)
    with pytest.raises(DimensionError):
        edgeconv_forward(np.zeros((5, 4)), np.zeros((5, 2), dtype=int), conv)
