"""Parameter containers and the dense layer used throughout the networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking base class for named tensors.

    Trainable parameters are tensors with ``requires_grad``; buffers (batch-norm
    running statistics) are tensors without it. Names are dotted attribute
    paths in declaration order.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, (Module, DenseLayerParams)):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_tensors(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors() if t.requires_grad}

    def buffers(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors() if not t.requires_grad}

    def state(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class DenseLayerParams:
    weight: Tensor
    bias: Tensor | None = None
    bn_gamma: Tensor | None = None
    bn_beta: Tensor | None = None
    bn_running_mean: Tensor | None = None
    bn_running_var: Tensor | None = None

    @classmethod
    def init(
        cls,
        in_width: int,
        out_width: int,
        rng: np.random.Generator,
        bias: bool = True,
        batch_norm: bool = True,
        zero: bool = False,
    ) -> "DenseLayerParams":
        w = np.zeros((in_width, out_width)) if zero else glorot_uniform(in_width, out_width, rng)
        p = cls(weight=Tensor(w, requires_grad=True))
        if bias:
            p.bias = Tensor(np.zeros(out_width), requires_grad=True)
        if batch_norm:
            p.bn_gamma = Tensor(np.ones(out_width), requires_grad=True)
            p.bn_beta = Tensor(np.zeros(out_width), requires_grad=True)
            p.bn_running_mean = Tensor(np.zeros(out_width))
            p.bn_running_var = Tensor(np.ones(out_width))
        return p

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in ("weight", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            t = getattr(self, key)
            if t is not None:
                yield prefix + key, t


class Dense(Module):
    """Linear map, optional batch norm, optional (leaky) ReLU.

    ``slope=None`` leaves the output linear, ``0.0`` is a plain ReLU. The bias
    defaults to off when batch norm follows.
    """

    def __init__(
        self,
        in_width: int,
        out_width: int,
        rng: np.random.Generator,
        slope: float | None = 0.2,
        batch_norm: bool = True,
        bias: bool | None = None,
        zero: bool = False,
        bn_momentum: float = 0.9,
        bn_eps: float = 1e-5,
    ):
        if bias is None:
            # Batch norm subtracts any constant shift, so a bias would be dead weight.
            bias = not batch_norm
        self.params = DenseLayerParams.init(in_width, out_width, rng, bias=bias, batch_norm=batch_norm, zero=zero)
        self._in = in_width
        self._out = out_width
        self._slope = slope
        self._momentum = bn_momentum
        self._eps = bn_eps

    @property
    def in_width(self) -> int:
        return self._in

    @property
    def out_width(self) -> int:
        return self._out

    @property
    def slope(self) -> float | None:
        return self._slope

    @property
    def bn_momentum(self) -> float:
        return self._momentum

    @property
    def bn_eps(self) -> float:
        return self._eps

    def linear(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.params.weight)

    def finish(self, pre: Tensor, training: bool) -> Tensor:
        """Everything after the matrix product: bias, batch norm, activation."""
        p = self.params
        if p.bias is not None:
            pre = T.add(pre, p.bias)
        if p.has_bn:
            pre = T.batch_norm(pre, p, training, self._momentum, self._eps)
        if self._slope is None:
            return pre
        if self._slope == 0.0:
            return T.relu(pre)
        return T.leaky_relu(pre, self._slope)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.finish(self.linear(x), training)
