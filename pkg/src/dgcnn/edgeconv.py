"""EdgeConv: per-edge features from a shared MLP, reduced per point.

For a point ``i`` with neighbors ``j`` the edge input is one of

==================  ============================
GLOBAL_ONLY         ``x_i``
NEIGHBOR_ONLY       ``x_j``
NEIGHBOR_GAUSSIAN   ``x_j``, output weighted by ``exp(-|x_i - x_j|^2 / (2 bw^2))``
LOCAL_ONLY          ``x_j - x_i``
CENTRALIZED_ASYM    ``x_i (+) (x_j - x_i)``
PAIR_CONCAT         ``x_i (+) x_j``
==================  ============================

and the output is ``max_j`` (or ``sum_j``) of the MLP applied to each edge.

The first MLP layer is linear in the edge input, so by default it is evaluated
per point and then gathered onto edges (``k`` times fewer multiply-adds); the
``materialize=True`` path builds the full ``[n, k, width]`` edge input instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .graph import NeighborGraph
from .nn import Dense, Module
from .tensor import Tensor


class EdgeKind(str, enum.Enum):
    GLOBAL_ONLY = "global_only"
    NEIGHBOR_ONLY = "neighbor_only"
    NEIGHBOR_GAUSSIAN = "neighbor_gaussian"
    LOCAL_ONLY = "local_only"
    CENTRALIZED_ASYM = "centralized_asym"
    PAIR_CONCAT = "pair_concat"


class Aggregation(str, enum.Enum):
    MAX = "max"
    SUM = "sum"


_DOUBLE_WIDTH = {EdgeKind.CENTRALIZED_ASYM, EdgeKind.PAIR_CONCAT}


@dataclass(frozen=True)
class EdgeFunctionSpec:
    kind: EdgeKind = EdgeKind.CENTRALIZED_ASYM
    gaussian_bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", EdgeKind(self.kind))
        if self.kind is EdgeKind.NEIGHBOR_GAUSSIAN and not self.gaussian_bandwidth > 0:
            raise ParameterError(f"gaussian bandwidth must be positive, got {self.gaussian_bandwidth}")

    def input_width(self, features: int) -> int:
        return 2 * features if self.kind in _DOUBLE_WIDTH else features


def _neighbor_index(graph, x: Tensor) -> np.ndarray:
    idx = graph.neighbors if isinstance(graph, NeighborGraph) else np.asarray(graph)
    if idx.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"graph {idx.shape} does not match features {x.shape}")
    if idx.shape[-1] < 1:
        raise ContractError("empty neighbor row")
    return idx


def edge_inputs(x, graph, spec: EdgeFunctionSpec) -> Tensor:
    """Edge input tensor ``[..., n, k, width]``."""
    x = T.as_tensor(x)
    idx = _neighbor_index(graph, x)
    k = idx.shape[-1]
    xi = T.expand(x, -2, k)
    kind = spec.kind
    if kind is EdgeKind.GLOBAL_ONLY:
        return xi
    xj = T.gather_neighbors(x, idx)
    if kind in (EdgeKind.NEIGHBOR_ONLY, EdgeKind.NEIGHBOR_GAUSSIAN):
        return xj
    if kind is EdgeKind.LOCAL_ONLY:
        return T.sub(xj, xi)
    if kind is EdgeKind.CENTRALIZED_ASYM:
        return T.concat([xi, T.sub(xj, xi)], axis=-1)
    return T.concat([xi, xj], axis=-1)


def _first_layer_on_edges(x: Tensor, idx: np.ndarray, w: Tensor, kind: EdgeKind) -> Tensor:
    """``edge_input @ w`` without materializing the edge input."""
    F = x.shape[-1]
    lead = x.shape[:-1]
    if kind in _DOUBLE_WIDTH:
        top = T.matmul(x, T.slice_axis(w, 0, F, axis=0))
        bottom = T.matmul(x, T.slice_axis(w, F, 2 * F, axis=0))
        if kind is EdgeKind.CENTRALIZED_ASYM:
            # [x_i, x_j - x_i] @ [phi; theta] = x_i (phi - theta) + x_j theta
            own = T.sub(top, bottom)
        else:
            own = top
        own = T.reshape(own, lead[:-1] + (lead[-1], 1, w.shape[1]))
        return T.add(T.gather_neighbors(bottom, idx), own)
    proj = T.matmul(x, w)
    nbr = T.gather_neighbors(proj, idx)
    if kind is EdgeKind.LOCAL_ONLY:
        own = T.reshape(proj, lead[:-1] + (lead[-1], 1, w.shape[1]))
        return T.sub(nbr, own)
    return nbr


def aggregate(edge_features: Tensor, agg: Aggregation = Aggregation.MAX) -> Tensor:
    """Reduce ``[..., n, k, M]`` over the neighbor axis."""
    if edge_features.ndim < 2 or edge_features.shape[-2] < 1:
        raise DimensionError(f"aggregate needs [..., k, M] with k >= 1, got {edge_features.shape}")
    if Aggregation(agg) is Aggregation.MAX:
        return T.max_over_axis(edge_features, axis=-2)[0]
    return T.sum_over_axis(edge_features, axis=-2)


class EdgeConv(Module):
    """Shared edge MLP plus aggregation; ``widths`` are the MLP output widths."""

    def __init__(
        self,
        in_features: int,
        widths: Sequence[int],
        rng: np.random.Generator,
        spec: EdgeFunctionSpec = EdgeFunctionSpec(),
        agg: Aggregation = Aggregation.MAX,
        slope: float | None = 0.2,
        batch_norm: bool = True,
        bias: bool | None = None,
        bn_momentum: float = 0.9,
        bn_eps: float = 1e-5,
    ):
        if not widths:
            raise ParameterError("EdgeConv needs at least one MLP layer")
        self._spec = spec
        self._agg = Aggregation(agg)
        self._in = in_features
        mlp = []
        width = spec.input_width(in_features)
        for w in widths:
            mlp.append(Dense(width, w, rng, slope=slope, batch_norm=batch_norm, bias=bias,
                             bn_momentum=bn_momentum, bn_eps=bn_eps))
            width = w
        self.mlp = mlp

    @property
    def spec(self) -> EdgeFunctionSpec:
        return self._spec

    @property
    def agg(self) -> Aggregation:
        return self._agg

    @property
    def out_width(self) -> int:
        return self.mlp[-1].out_width

    def __call__(self, x, graph, training: bool = False, materialize: bool = False, fused: bool = True) -> Tensor:
        return edgeconv_forward(x, graph, self, training=training, materialize=materialize, fused=fused)


def edgeconv_forward(
    x,
    graph,
    conv: EdgeConv,
    training: bool = False,
    materialize: bool = False,
    fused: bool = True,
) -> Tensor:
    """``x'_i = agg_j MLP(edge_input(i, j))`` for features ``[..., n, F]``.

    With ``fused`` (the default) a final batch-normalized layer under MAX
    aggregation goes through :func:`tensor.edge_bn_act_max`.
    """
    x = T.as_tensor(x)
    if x.shape[-1] != conv._in:
        raise DimensionError(f"EdgeConv expects {conv._in} input features, got {x.shape[-1]}")
    idx = _neighbor_index(graph, x)
    k = idx.shape[-1]
    kind = conv.spec.kind

    if kind is EdgeKind.GLOBAL_ONLY and not materialize:
        # All k edges carry the same value, so the reduction is known in closed form.
        h = x
        for layer in conv.mlp:
            h = layer(h, training)
        return h if conv.agg is Aggregation.MAX else T.scale(h, float(k))

    first, rest = conv.mlp[0], conv.mlp[1:]
    if materialize:
        pre = first.linear(edge_inputs(x, idx, conv.spec))
    else:
        pre = _first_layer_on_edges(x, idx, first.params.weight, kind)
    last = conv.mlp[-1]
    fuse = (
        fused
        and conv.agg is Aggregation.MAX
        and kind is not EdgeKind.NEIGHBOR_GAUSSIAN
        and last.params.has_bn
        and last.params.bias is None
    )
    if fuse:
        if rest:
            h = first.finish(pre, training)
            for layer in rest[:-1]:
                h = layer(h, training)
            pre = last.linear(h)
        return T.edge_bn_act_max(pre, last.params, last.slope, training, last.bn_momentum, last.bn_eps)

    h = first.finish(pre, training)
    for layer in rest:
        h = layer(h, training)

    if kind is EdgeKind.NEIGHBOR_GAUSSIAN:
        diff = T.sub(T.gather_neighbors(x, idx), T.expand(x, -2, k))
        sq = T.sum_over_axis(T.mul(diff, diff), axis=-1, keepdims=True)
        bw = conv.spec.gaussian_bandwidth
        h = T.mul(h, T.exp(T.scale(sq, -1.0 / (2.0 * bw * bw))))
    return aggregate(h, conv.agg)


def asym_edge_feature(x_i, x_j, theta, phi) -> np.ndarray:
    """Single-layer reference: ``ReLU(theta_m . (x_j - x_i) + phi_m . x_i)`` per channel.

    ``theta`` and ``phi`` are ``[M, F]`` with one filter per row.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if theta.shape != phi.shape or theta.shape[1] != x_i.shape[-1] or x_i.shape != x_j.shape:
        raise DimensionError(
            f"asym_edge_feature: theta {theta.shape}, phi {phi.shape}, x_i {x_i.shape}, x_j {x_j.shape}"
        )
    return np.maximum(theta @ (x_j - x_i) + phi @ x_i, 0.0)
