"""Classification and part-segmentation networks built from EdgeConv stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from . import tensor as T
from .edgeconv import Aggregation, EdgeConv, EdgeFunctionSpec, EdgeKind
from .errors import DimensionError, ParameterError
from .graph import knn_indices
from .nn import Dense, Module
from .tensor import Tensor


def _tupled(cls, values: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ParameterError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


@dataclass(frozen=True)
class ClassifierConfig:
    k: int = 20
    edgeconv_widths: tuple[int, ...] = (64, 64, 128, 256)
    embed_width: int = 1024
    head_widths: tuple[int, ...] = (512, 256)
    num_classes: int = 40
    dropout_keep: float = 0.5
    dynamic_graph: bool = True
    centralization: bool = True
    global_pool: str = "max"
    edge_kind: str | None = None  # overrides centralization, e.g. "global_only"
    self_loop: bool = True
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    use_spatial_transformer: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if len(self.edgeconv_widths) < 1:
            raise ParameterError("at least one EdgeConv stage is required")
        if self.global_pool not in ("max", "sum"):
            raise ParameterError(f"global_pool must be 'max' or 'sum', got {self.global_pool!r}")
        if self.k < 1:
            raise ParameterError(f"k must be positive, got {self.k}")

    @property
    def edge_spec(self) -> EdgeFunctionSpec:
        if self.edge_kind is not None:
            return EdgeFunctionSpec(EdgeKind(self.edge_kind))
        return EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM if self.centralization else EdgeKind.PAIR_CONCAT)

    @property
    def skip_width(self) -> int:
        return sum(self.edgeconv_widths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ClassifierConfig":
        return _tupled(cls, values)


@dataclass(frozen=True)
class TransformConfig:
    edge_widths: tuple[int, ...] = (64, 128)
    embed_width: int = 1024
    head_widths: tuple[int, ...] = (512, 256)

    @classmethod
    def from_dict(cls, values: dict) -> "TransformConfig":
        return _tupled(cls, values)


@dataclass(frozen=True)
class SegmenterConfig:
    k: int = 20
    edgeconv_widths: tuple[int, ...] = (64, 64, 64)
    embed_width: int = 1024
    head_widths: tuple[int, ...] = (256, 256, 128)
    num_part_labels: int = 50
    category_vector_width: int = 16
    use_spatial_transformer: bool = True
    in_channels: int = 3
    dropout_keep: float = 0.5
    dynamic_graph: bool = True
    self_loop: bool = True
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    transform: TransformConfig = field(default_factory=TransformConfig)

    def __post_init__(self):
        if self.in_channels < 3:
            raise ParameterError("segmentation input needs at least the three coordinate channels")
        if isinstance(self.transform, dict):
            object.__setattr__(self, "transform", TransformConfig.from_dict(self.transform))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "SegmenterConfig":
        return _tupled(cls, values)


def _as_batch(points, channels: int | None = None) -> tuple[Tensor, bool]:
    x = T.as_tensor(points)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"points must be [n, F] or [B, n, F], got {x.shape}")
    if channels is not None and x.shape[-1] != channels:
        raise DimensionError(f"expected {channels} input channels, got {x.shape[-1]}")
    return x, single


def _dense(i, o, rng, slope, momentum, eps, **kw) -> Dense:
    return Dense(i, o, rng, slope=slope, bn_momentum=momentum, bn_eps=eps, **kw)


class SpatialTransform(Module):
    """Predicts a per-cloud 3x3 matrix and right-multiplies the points by it.

    The last layer starts at zero and the identity is added to its output, so a
    fresh transform is exactly the identity map.
    """

    def __init__(self, k: int, rng: np.random.Generator, cfg: TransformConfig = TransformConfig(),
                 slope: float = 0.2, momentum: float = 0.9, eps: float = 1e-5, self_loop: bool = True):
        self._k = k
        self._self_loop = self_loop
        self.edge = EdgeConv(3, cfg.edge_widths, rng, EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM),
                             slope=slope, bn_momentum=momentum, bn_eps=eps)
        self.embed = _dense(self.edge.out_width, cfg.embed_width, rng, slope, momentum, eps)
        head, width = [], cfg.embed_width
        for w in cfg.head_widths:
            head.append(_dense(width, w, rng, slope, momentum, eps))
            width = w
        self.head = head
        self.out = Dense(width, 9, rng, slope=None, batch_norm=False, zero=True)

    def __call__(self, points: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        x, single = _as_batch(points, 3)
        B = x.shape[0]
        idx = knn_indices(x.data, self._k, self._self_loop)
        h = self.edge(x, idx, training)
        h = self.embed(h, training)
        h = T.max_over_axis(h, axis=1)[0]
        for layer in self.head:
            h = layer(h, training)
        m = T.reshape(self.out(h, training), (B, 3, 3))
        m = T.add(m, Tensor(np.eye(3), dtype=m.dtype))
        moved = T.matmul(x, m)
        if single:
            return T.reshape(m, (3, 3)), T.reshape(moved, moved.shape[1:])
        return m, moved


def spatial_transform(points, transform: SpatialTransform, training: bool = False) -> tuple[Tensor, Tensor]:
    return transform(points, training)


class DGCNNClassifier(Module):
    """EdgeConv stages, skip concatenation, shared embedding, global pool, MLP head."""

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator):
        self._cfg = cfg
        s, m, e = cfg.leaky_slope, cfg.bn_momentum, cfg.bn_eps
        if cfg.use_spatial_transformer:
            self.transform = SpatialTransform(cfg.k, rng, slope=s, momentum=m, eps=e, self_loop=cfg.self_loop)
        convs, width = [], cfg.in_channels
        for w in cfg.edgeconv_widths:
            convs.append(EdgeConv(width, [w], rng, cfg.edge_spec, Aggregation.MAX, slope=s, bn_momentum=m, bn_eps=e))
            width = w
        self.convs = convs
        self.embed = _dense(cfg.skip_width, cfg.embed_width, rng, s, m, e)
        head, width = [], cfg.embed_width
        for w in cfg.head_widths:
            head.append(_dense(width, w, rng, s, m, e))
            width = w
        self.head = head
        self.out = Dense(width, cfg.num_classes, rng, slope=None, batch_norm=False)

    @property
    def cfg(self) -> ClassifierConfig:
        return self._cfg

    def __call__(self, points, training: bool = False, rng: np.random.Generator | None = None,
                 trace: dict | None = None) -> Tensor:
        return self.forward(points, training, rng, trace)

    def forward(self, points, training: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None) -> Tensor:
        """Logits ``[B, c]`` for ``[B, n, 3]`` points (``[c]`` for a single cloud).

        ``trace``, when given, receives the per-stage graphs and features.
        """
        cfg = self._cfg
        x, single = _as_batch(points, cfg.in_channels)
        n = x.shape[1]
        if n < cfg.k:
            raise ParameterError(f"cloud has {n} points but k={cfg.k}")
        if cfg.use_spatial_transformer:
            matrix, x = self.transform(x, training)
            if trace is not None:
                trace["transform"] = x.data
                trace["matrix"] = matrix.data
        needs_graph = cfg.edge_spec.kind is not EdgeKind.GLOBAL_ONLY
        static = knn_indices(x.data, cfg.k, cfg.self_loop) if needs_graph else None
        h, outs, graphs = x, [], []
        for i, conv in enumerate(self.convs):
            if not needs_graph:
                idx = np.broadcast_to(np.arange(n)[:, None], (x.shape[0], n, 1))
            elif cfg.dynamic_graph and i > 0:
                idx = knn_indices(h.data, cfg.k, cfg.self_loop)
            else:
                idx = static
            graphs.append(idx)
            h = conv(h, idx, training)
            outs.append(h)
        if trace is not None:
            trace["graphs"] = graphs
            trace["features"] = [o.data for o in outs]
        h = self.embed(T.concat(outs, axis=-1), training)
        if cfg.global_pool == "max":
            g = T.max_over_axis(h, axis=1)[0]
        else:
            g = T.sum_over_axis(h, axis=1)
        for layer in self.head:
            g = T.dropout(layer(g, training), cfg.dropout_keep, training, rng)
        logits = self.out(g, training)
        return T.reshape(logits, logits.shape[1:]) if single else logits


def classify_forward(points, model: DGCNNClassifier, training: bool = False, rng=None) -> Tensor:
    return model(points, training, rng)


def pointnet_config(cfg: ClassifierConfig) -> ClassifierConfig:
    """Point-independent baseline: every stage sees only ``x_i``."""
    return replace(cfg, edge_kind=EdgeKind.GLOBAL_ONLY.value, dynamic_graph=False)


def pointnet_baseline_forward(points, model: DGCNNClassifier, training: bool = False, rng=None) -> Tensor:
    if model.cfg.edge_spec.kind is not EdgeKind.GLOBAL_ONLY:
        raise ParameterError("pointnet_baseline_forward needs a model built from pointnet_config(...)")
    return model(points, training, rng)


class DGCNNSegmenter(Module):
    """Per-point labels from local EdgeConv features plus the pooled global descriptor."""

    def __init__(self, cfg: SegmenterConfig, rng: np.random.Generator):
        self._cfg = cfg
        s, m, e = cfg.leaky_slope, cfg.bn_momentum, cfg.bn_eps
        if cfg.use_spatial_transformer:
            self.transform = SpatialTransform(cfg.k, rng, cfg.transform, s, m, e, cfg.self_loop)
        convs, width = [], cfg.in_channels
        for w in cfg.edgeconv_widths:
            convs.append(EdgeConv(width, [w], rng, EdgeFunctionSpec(), Aggregation.MAX,
                                  slope=s, bn_momentum=m, bn_eps=e))
            width = w
        self.convs = convs
        skip = sum(cfg.edgeconv_widths)
        self.embed = _dense(skip, cfg.embed_width, rng, s, m, e)
        head, width = [], cfg.embed_width + cfg.category_vector_width + skip
        for w in cfg.head_widths:
            head.append(_dense(width, w, rng, s, m, e))
            width = w
        self.head = head
        self.out = Dense(width, cfg.num_part_labels, rng, slope=None, batch_norm=False)

    @property
    def cfg(self) -> SegmenterConfig:
        return self._cfg

    def __call__(self, points, category_onehot=None, training: bool = False, rng=None,
                 trace: dict | None = None) -> Tensor:
        return self.forward(points, category_onehot, training, rng, trace)

    def forward(self, points, category_onehot=None, training: bool = False, rng=None,
                trace: dict | None = None) -> Tensor:
        cfg = self._cfg
        x, single = _as_batch(points, cfg.in_channels)
        B, n = x.shape[0], x.shape[1]
        if n < cfg.k:
            raise ParameterError(f"cloud has {n} points but k={cfg.k}")
        cat = None
        if cfg.category_vector_width:
            if category_onehot is None:
                raise ParameterError("this segmenter needs a category vector")
            cat = T.as_tensor(category_onehot, dtype=x.dtype)
            if single and cat.ndim == 1:
                cat = T.reshape(cat, (1,) + cat.shape)
            if cat.shape != (B, cfg.category_vector_width):
                raise ParameterError(f"category vector shape {cat.shape}, expected {(B, cfg.category_vector_width)}")
        elif category_onehot is not None and np.size(T.as_tensor(category_onehot).data):
            raise ParameterError("category vector given but category_vector_width is 0")

        if cfg.use_spatial_transformer:
            coords = T.slice_axis(x, 0, 3, axis=-1)
            _, moved = self.transform(coords, training)
            x = moved if cfg.in_channels == 3 else T.concat([moved, T.slice_axis(x, 3, cfg.in_channels, axis=-1)], -1)
            if trace is not None:
                trace["transform"] = x.data
        static = knn_indices(x.data, cfg.k, cfg.self_loop)
        h, outs, graphs = x, [], []
        for i, conv in enumerate(self.convs):
            idx = knn_indices(h.data, cfg.k, cfg.self_loop) if (cfg.dynamic_graph and i > 0) else static
            graphs.append(idx)
            h = conv(h, idx, training)
            outs.append(h)
        if trace is not None:
            trace["graphs"] = graphs
            trace["features"] = [o.data for o in outs]
        local = T.concat(outs, axis=-1)
        g = T.max_over_axis(self.embed(local, training), axis=1)[0]
        pieces = [T.expand(g, 1, n)]
        if cat is not None:
            pieces.append(T.expand(cat, 1, n))
        pieces.append(local)
        h = T.concat(pieces, axis=-1)
        for i, layer in enumerate(self.head):
            h = layer(h, training)
            if i < len(self.head) - 1:
                h = T.dropout(h, cfg.dropout_keep, training, rng)
        logits = self.out(h, training)
        return T.reshape(logits, logits.shape[1:]) if single else logits


def segment_forward(points, category_onehot, model: DGCNNSegmenter, training: bool = False, rng=None) -> Tensor:
    return model(points, category_onehot, training, rng)
