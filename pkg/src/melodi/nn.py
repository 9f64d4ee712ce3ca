"""Parameter containers shared by the layers."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from .tensor import Parameter, Tensor, dropout, gelu, get_default_dtype, layer_norm, matmul


class Module:
    """Walks attributes to collect parameters under dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(get_default_dtype()))


def const(shape, value: float) -> Parameter:
    return Parameter(np.full(shape, value, dtype=get_default_dtype()))


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.scale = const((dim,), 1.0)
        self.offset = const((dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.offset)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w_in = normal(rng, (dim, hidden), dim ** -0.5)
        self.b_in = const((hidden,), 0.0)
        self.w_out = normal(rng, (hidden, dim), hidden ** -0.5)
        self.b_out = const((dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(gelu(matmul(x, self.w_in) + self.b_in), self.w_out) + self.b_out


class DropoutStream:
    """Dropout masks drawn from a counter-based stream keyed on (seed, step, path).

    The same (seed, step, path) always produces the same mask, so a resumed
    run replays the exact randomness of an uninterrupted one.
    """

    def __init__(self, rate: float, seed: int = 0, step: int = 0):
        self.rate = float(rate)
        self.seed = int(seed)
        self.step = int(step)

    def __call__(self, x: Tensor, path: str) -> Tensor:
        if self.rate <= 0.0:
            return x
        rng = np.random.default_rng([self.seed, self.step, zlib.crc32(path.encode())])
        keep = rng.random(x.shape) >= self.rate
        return dropout(x, keep, self.rate)


NO_DROPOUT = DropoutStream(0.0)
