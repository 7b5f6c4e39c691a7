"""Pairwise distances and k-nearest-neighbor graphs in any feature dimension.

Rows of a neighbor table are ordered by (squared distance, index), so graphs
are fully deterministic. With ``self_loop`` the point itself occupies the first
slot and counts towards ``k``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError, ParameterError

# Test hook for mutation checks: "descending" breaks distance ties towards the
# higher index, which the oracle comparison must detect.
_tie_order = "ascending"


def set_tie_fault(enabled: bool) -> None:
    global _tie_order
    _tie_order = "descending" if enabled else "ascending"


def _features(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim < 2:
        raise DimensionError(f"feature matrix must be [n, f] (optionally batched), got shape {arr.shape}")
    if arr.shape[-2] < 1 or arr.shape[-1] < 1:
        raise DimensionError(f"feature matrix needs n >= 1 and f >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("feature matrix contains non-finite values")
    return arr


def pairwise_sq_distances(x) -> np.ndarray:
    """``D[..., i, j] = |x_i - x_j|^2`` via the expanded form, clamped at zero."""
    x = _features(x)
    xt = np.swapaxes(x, -1, -2)
    if T.is_strict():
        # Accumulate over features in index order so every row rounds identically.
        sq = x[..., 0] * x[..., 0]
        for f in range(1, x.shape[-1]):
            sq += x[..., f] * x[..., f]
        gram = T._strict_matmul(x, xt)
    else:
        sq = np.einsum("...if,...if->...i", x, x)
        gram = x @ xt
    # Norms first: sq_i + sq_j is commutative, so D is exactly symmetric
    # whenever the Gram matrix is.
    d = sq[..., :, None] + sq[..., None, :]
    gram *= x.dtype.type(2.0)
    d -= gram
    np.maximum(d, 0.0, out=d)
    n = x.shape[-2]
    d[..., np.arange(n), np.arange(n)] = 0.0
    return d


def _check_k(n: int, k: int, self_loop: bool) -> None:
    hi = n if self_loop else n - 1
    if not 1 <= k <= hi:
        loop = "with" if self_loop else "without"
        raise ParameterError(f"k={k} out of range [1, {hi}] for n={n} {loop} self-loop")


def _ordered_topk(key: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row under (value, index) order."""
    rows, n = key.shape
    cols = np.arange(n)
    tie = cols if _tie_order == "ascending" else -cols
    if k == n:
        return np.lexsort((np.broadcast_to(tie, key.shape), key), axis=-1)
    # Sorting values is much cheaper than argpartition; the k-th value then
    # thresholds each row. Rows where it ties with the (k+1)-th need the full order.
    ranked = np.sort(key, axis=-1)
    kth = ranked[:, k - 1 : k]
    ambiguous = ranked[:, k] == kth[:, 0]
    mask = key <= kth
    mask[ambiguous] = False
    sel = np.empty((rows, k), dtype=np.intp)
    sel[~ambiguous] = np.flatnonzero(mask).reshape(-1, k) % n
    if ambiguous.any():
        sub = key[ambiguous]
        sel[ambiguous] = np.lexsort((np.broadcast_to(tie, sub.shape), sub), axis=-1)[:, :k]
    vals = np.take_along_axis(key, sel, axis=-1)
    order = np.lexsort((tie[sel], vals), axis=-1)
    return np.take_along_axis(sel, order, axis=-1)


def knn_indices(x, k: int, self_loop: bool = True, distances: np.ndarray | None = None) -> np.ndarray:
    """Neighbor table ``[..., n, k]`` for features ``[..., n, f]``."""
    d = pairwise_sq_distances(x) if distances is None else distances
    n = d.shape[-1]
    _check_k(n, k, self_loop)
    key = d.reshape(-1, n, n)
    if distances is not None:
        key = key.copy()
    diag = np.arange(n)
    key[:, diag, diag] = -np.inf if self_loop else np.inf
    idx = _ordered_topk(key.reshape(-1, n), k)
    return idx.reshape(d.shape[:-1] + (k,))


@dataclass
class NeighborGraph:
    neighbors: np.ndarray
    self_loop: bool
    sq_distances: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def edges(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i in range(self.n) for j in self.neighbors[i]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,j,rank,distance2\n")
        for i in range(self.n):
            for r, j in enumerate(self.neighbors[i]):
                d = self.sq_distances[i, r] if self.sq_distances is not None else float("nan")
                buf.write(f"{i},{int(j)},{r},{float(d)!r}\n")
        return buf.getvalue()

    def relabel(self, perm: np.ndarray) -> "NeighborGraph":
        """Graph of the point set reordered so new point ``p`` is old point ``perm[p]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        sq = None if self.sq_distances is None else self.sq_distances[perm]
        return NeighborGraph(inv[self.neighbors[perm]], self.self_loop, sq)


def knn_graph(x, k: int, self_loop: bool = True) -> NeighborGraph:
    x = _features(x)
    if x.ndim != 2:
        raise DimensionError(f"knn_graph takes one [n, f] feature matrix, got shape {x.shape}")
    d = pairwise_sq_distances(x)
    idx = knn_indices(x, k, self_loop, distances=d)
    return NeighborGraph(idx, self_loop, np.take_along_axis(d, idx, axis=1))


def recompute_graph(features, k: int, self_loop: bool = True) -> NeighborGraph:
    """k-NN graph in the feature space of a given layer."""
    return knn_graph(features, k, self_loop)


def brute_force_order(x, self_loop: bool = True) -> np.ndarray:
    """Reference ordering: direct differences, full sort of every row.

    Row ``i`` lists all candidate neighbors by (squared distance, index); with
    ``self_loop`` the point itself comes first.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    rows = []
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            diff = x[i] - x[j]
            cand.append((float(np.dot(diff, diff)), j))
        cand.sort()
        picked = [j for _, j in cand]
        rows.append([i] + picked if self_loop else picked)
    return np.array(rows, dtype=np.int64).reshape(n, n if self_loop else n - 1)


def brute_force_knn(x, k: int, self_loop: bool = True) -> np.ndarray:
    n = np.asarray(x).shape[0]
    _check_k(n, k, self_loop)
    return brute_force_order(x, self_loop)[:, :k]
