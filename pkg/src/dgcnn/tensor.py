"""Minimal dense tensor with reverse-mode differentiation.

Forward values live in numpy arrays. Differentiable primitives record a node on
the innermost active :class:`Tape`; :func:`backward` walks the tape in reverse
and returns a :class:`Gradients` map for every leaf tensor that requires grad.

Outside of a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError, NumericError, ParameterError

_default_dtype = np.dtype(np.float64)
_strict = False
_tapes: list["Tape"] = []


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ParameterError(f"unsupported dtype {dt}")
    _default_dtype = dt


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_strict() -> bool:
    return _strict


def set_strict(flag: bool) -> None:
    """Strict-deterministic mode: matrix products accumulate in a fixed order."""
    global _strict
    _strict = bool(flag)


@contextlib.contextmanager
def strict_mode(flag: bool = True) -> Iterator[None]:
    prev = _strict
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dt = np.dtype(dtype) if dtype is not None else _default_dtype
        self.data = np.asarray(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # Discrete choices the op made (sign masks, argmax picks, neighbor indices).
    # Where they change, the recorded function has a kink or jump.
    structure: np.ndarray | None = None


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the nodes
    consuming them.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


def _finite_or_raise(op: str, arr: np.ndarray) -> None:
    # A finite sum implies finite entries; an overflowing sum falls back to the exact test.
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


# Ops that only move, select or shrink values cannot turn finite inputs into
# non-finite outputs, so their outputs skip the scan.
_VALUE_PRESERVING = frozenset({"leaky_relu", "relu", "max", "concat", "slice", "reshape", "expand", "gather"})


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd, structure=None) -> Tensor:
    if op not in _VALUE_PRESERVING:
        _finite_or_raise(op, out)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.record(Node(op, inputs, result, bwd, structure))
    return result


class Gradients:
    """Gradient lookup keyed by tensor identity.

    Tensors that the loss does not depend on get a zero gradient.
    """

    def __init__(self, table: dict[int, tuple[Tensor, np.ndarray]]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._table.get(id(t))
        if hit is not None and hit[0] is t:
            return hit[1]
        return np.zeros(t.shape, dtype=t.dtype)

    def __contains__(self, t: Tensor) -> bool:
        hit = self._table.get(id(t))
        return hit is not None and hit[0] is t

    def __len__(self) -> int:
        return len(self._table)


def structure_signature(tape: Tape) -> list[np.ndarray]:
    """Discrete decisions of every recorded op, in tape order.

    Two evaluations of the same function lie on one smooth piece when their
    signatures are equal.
    """
    return [n.structure for n in tape.nodes if n.structure is not None]


def same_structure(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                if not tape.produced(inp):
                    leaves[key] = inp
    return Gradients({k: (leaves[k], grads[k]) for k in leaves})


# ----------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def _strict_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Each output element accumulates over k in index order, independent of its row.
    K = a.shape[-1]
    if b.ndim == 2:
        out = a[..., 0, None] * b[0]
        for k in range(1, K):
            out += a[..., k, None] * b[k]
    else:
        out = a[..., 0, None] * b[..., 0, None, :]
        for k in range(1, K):
            out += a[..., k, None] * b[..., k, None, :]
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _strict:
        return _strict_matmul(a, b)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last axis of ``a``.

    ``b`` is either a 2-D ``[k, n]`` matrix shared by every leading index of
    ``a``, or a stack ``[B, k, n]`` matching a ``[B, m, k]`` operand.
    """
    if a.ndim < 2 or b.ndim not in (2, 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: batch extents differ, {a.shape} x {b.shape}")
    out = _mm(a.data, b.data)

    if b.ndim == 2:

        def bwd(g):
            ga = _mm(g, b.data.T) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = _mm(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            return ga, gb

    else:

        def bwd(g):
            ga = _mm(g, b.data.transpose(0, 2, 1)) if a.requires_grad else None
            gb = _mm(a.data.transpose(0, 2, 1), g) if b.requires_grad else None
            return ga, gb

    return _emit("matmul", (a, b), out, bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ParameterError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(pos, g, slope * g),), pos)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0).astype(x.dtype, copy=False)
    return _emit("relu", (x,), out, lambda g: (np.where(pos, g, 0.0).astype(g.dtype, copy=False),), pos)


def batch_norm(
    x: Tensor,
    params,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each channel (last axis) over all leading axes.

    ``params`` carries ``bn_gamma``, ``bn_beta`` (trainable) and
    ``bn_running_mean``, ``bn_running_var`` (updated in training mode as
    ``momentum * running + (1 - momentum) * batch``).
    """
    gamma, beta = params.bn_gamma, params.bn_beta
    C = x.shape[-1]
    if gamma.shape != (C,):
        raise DimensionError(f"batch_norm: {C} channels but gamma has shape {gamma.shape}")
    flat = x.data.reshape(-1, C)
    N = flat.shape[0]
    if N < 1:
        raise DimensionError("batch_norm: empty batch")

    if training:
        if N < 2:
            raise ParameterError("batch_norm: training mode needs at least two rows for batch statistics")
        mean = flat.mean(axis=0)
        centered = flat - mean
        var = (centered * centered).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        rm, rv = params.bn_running_mean, params.bn_running_var
        rm.data = momentum * rm.data + (1.0 - momentum) * mean
        rv.data = momentum * rv.data + (1.0 - momentum) * var
        out = (xhat * gamma.data + beta.data).reshape(x.shape)

        def bwd(g):
            gf = g.reshape(-1, C)
            ggamma = (gf * xhat).sum(axis=0)
            gbeta = gf.sum(axis=0)
            gx = None
            if x.requires_grad:
                dxhat = gf * gamma.data
                gx = (inv / N) * (N * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                gx = gx.reshape(x.shape)
            return gx, ggamma, gbeta

    else:
        inv = 1.0 / np.sqrt(params.bn_running_var.data + eps)
        xhat = (flat - params.bn_running_mean.data) * inv
        out = (xhat * gamma.data + beta.data).reshape(x.shape)

        def bwd(g):
            gf = g.reshape(-1, C)
            gx = (gf * (gamma.data * inv)).reshape(x.shape)
            return gx, (gf * xhat).sum(axis=0), gf.sum(axis=0)

    return _emit("batch_norm", (x, gamma, beta), out, bwd)


def _activate(z: np.ndarray, slope: float | None) -> tuple[np.ndarray, np.ndarray | None]:
    if slope is None:
        return z, None
    pos = z > 0
    return np.where(pos, z, slope * z), pos


def _first_match(flat: np.ndarray, ext: np.ndarray, zero: np.ndarray) -> np.ndarray:
    """Mask of the lowest neighbor index attaining ``ext`` per row and channel."""
    pick = flat == ext[:, None, :]
    if zero.size:
        pick[:, :, zero] = False
        pick[:, 0, zero] = True
    if np.count_nonzero(pick) != ext.size:
        pick &= np.cumsum(pick, axis=1) == 1
    return pick


def edge_bn_act_max(
    pre: Tensor,
    params,
    slope: float | None,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Fused ``max over axis -2 of act(batch_norm(pre))`` for ``pre [..., k, C]``.

    Batch norm followed by a (leaky) ReLU is monotone in each channel:
    non-decreasing where ``gamma * inv_std > 0`` and non-increasing where it is
    negative. The maximum over neighbors therefore sits at the per-channel
    argmax (or argmin) of ``pre``, so normalization and activation run on the
    reduced ``[..., C]`` tensor only. Values equal the unfused composition
    exactly; the gradient still reaches every edge through the batch
    statistics.
    """
    gamma, beta = params.bn_gamma, params.bn_beta
    C = pre.shape[-1]
    if pre.ndim < 2 or pre.shape[-2] < 1:
        raise DimensionError(f"edge_bn_act_max needs [..., k, C] with k >= 1, got {pre.shape}")
    k = pre.shape[-2]
    flat = pre.data.reshape(-1, k, C)
    N = flat.shape[0] * k

    if training:
        if N < 2:
            raise ParameterError("batch_norm: training mode needs at least two rows for batch statistics")
        mean = flat.mean(axis=(0, 1))
        centered = flat - mean
        var = np.einsum("rkc,rkc->c", centered, centered) / N
        del centered
        rm, rv = params.bn_running_mean, params.bn_running_var
        rm.data = momentum * rm.data + (1.0 - momentum) * mean
        rv.data = momentum * rv.data + (1.0 - momentum) * var
    else:
        mean = params.bn_running_mean.data
        var = params.bn_running_var.data
    inv = 1.0 / np.sqrt(var + eps)
    a = gamma.data * inv

    ext = flat.max(axis=1)
    neg = np.flatnonzero(a < 0)
    if neg.size:
        ext[:, neg] = flat[:, :, neg].min(axis=1)
    zero = np.flatnonzero(a == 0)
    if zero.size:
        ext[:, zero] = flat[:, 0, zero]
    pick = _first_match(flat, ext, zero)
    xhat = (ext - mean) * inv
    z = xhat * gamma.data + beta.data
    y, pos = _activate(z, slope)
    out = y.reshape(pre.shape[:-2] + (C,))

    def bwd(g):
        gz = g.reshape(-1, C)
        if pos is not None:
            gz = np.where(pos, gz, slope * gz)
        ggamma = (gz * xhat).sum(axis=0)
        gbeta = gz.sum(axis=0)
        gpre = None
        if pre.requires_grad:
            dxhat = gz * gamma.data
            routed = pick * (inv * dxhat)[:, None, :]
            if training:
                # Non-selected edges only see the batch statistics: an affine function of pre.
                s1 = dxhat.sum(axis=0)
                s2 = (dxhat * xhat).sum(axis=0)
                c1 = -(inv * inv) * s2 / N
                c0 = -inv * s1 / N - c1 * mean
                routed += flat * c1
                routed += c0
            gpre = routed.reshape(pre.shape)
        return gpre, ggamma, gbeta

    structure = pick if pos is None else np.concatenate([pick.reshape(-1), pos.reshape(-1)])
    return _emit("edge_bn_act_max", (pre, gamma, beta), out, bwd, structure)


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def max_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` with ties resolved to the lowest index."""
    ax = _axis(x, axis)
    if x.shape[ax] < 1:
        raise DimensionError("max_over_axis: empty axis")
    arg = np.argmax(x.data, axis=ax)
    arg_k = np.expand_dims(arg, ax)
    vals = np.take_along_axis(x.data, arg_k, axis=ax)
    out = vals if keepdims else np.squeeze(vals, axis=ax)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg_k, g if keepdims else np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _emit("max", (x,), out, bwd, arg), arg


def sum_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = _axis(x, axis)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _emit("sum", (x,), out, bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat: no parts")
    ax = _axis(parts[0], axis)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: extents {p.shape} do not match {ref} off axis {ax}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", tuple(parts), out, bwd)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = _axis(x, axis)
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _emit("slice", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def expand(x: Tensor, axis: int, count: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``count`` times along it."""
    ax = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), count, axis=ax)
    return _emit("expand", (x,), out, lambda g: (g.sum(axis=ax),))


def gather_neighbors(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``x [..., n, F]`` picked by ``index [..., n, k]`` -> ``[..., n, k, F]``."""
    index = np.asarray(index)
    lead = x.shape[:-2]
    n, F = x.shape[-2], x.shape[-1]
    if index.shape[:-1] != lead + (n,):
        raise DimensionError(f"gather: index {index.shape} does not fit features {x.shape}")
    B = int(np.prod(lead)) if lead else 1
    k = index.shape[-1]
    offsets = (np.arange(B) * n).reshape((B, 1, 1))
    flat_idx = (index.reshape(B, n, k) + offsets).reshape(-1)
    flat_x = x.data.reshape(B * n, F)
    out = flat_x[flat_idx].reshape(lead + (n, k, F))

    def bwd(g):
        gx = _scatter_rows(flat_idx, g.reshape(-1, F), B * n)
        return (gx.reshape(x.shape),)

    return _emit("gather", (x,), out, bwd, index)


def _scatter_rows(idx: np.ndarray, values: np.ndarray, rows: int) -> np.ndarray:
    """``out[r] = sum of values[e] over edges e with idx[e] == r``."""
    E = idx.size
    scatter = sparse.csr_matrix((np.ones(E, dtype=values.dtype), (idx, np.arange(E))), shape=(rows, E))
    return np.asarray(scatter @ values)


def dropout(x: Tensor, keep_prob: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept entries are scaled by ``1 / keep_prob``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob
    return _emit("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _emit("softmax_xent", (logits,), loss, bwd)


# ----------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error of each coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    return grad_check_detail(f, x, step)[0]


def grad_check_detail(f: Callable[[Tensor], Tensor], x, step: float = 1e-5
                      ) -> tuple[float, np.ndarray, np.ndarray]:
    """``(max relative error, analytic gradient, numeric gradient)``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = f(xt)
    analytic = backward(tape, out)[xt]
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x0, dtype=np.float64)).item()
        flat[i] = orig - step
        fm = f(Tensor(x0, dtype=np.float64)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    if not np.isfinite(numeric).all():
        raise NumericError("grad_check: non-finite function values")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    worst = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return worst, analytic, numeric
