"""Parameterised layers of the convolutional autoencoder backbone."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Module) and name != "_children":
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            if child is not None:
                yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.param("weight", _uniform(rng, bound, (c_out, c_in, k, k)))
        self.param("bias", _uniform(rng, bound, (c_out,)))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-6):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.param("weight", np.ones(channels, dtype=np.float32))
        self.param("bias", np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class ResBlock(Module):
    """norm -> SiLU -> conv, twice, plus a (projected) skip connection."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, groups: int = 8):
        super().__init__()
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(rng, c_in, c_out, 3)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(rng, c_out, c_out, 3)
        self.skip = Conv2d(rng, c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = self.conv2(T.silu(self.norm2(h)))
        skip = self.skip(x) if self.skip is not None else x
        return skip + h


class AttnBlock(Module):
    """Single-head self-attention over spatial positions with a residual path."""

    def __init__(self, rng: np.random.Generator, channels: int, groups: int = 8, max_positions: int = 1024):
        super().__init__()
        self.max_positions = max_positions
        self.norm = GroupNorm(channels, groups)
        self.q = Conv2d(rng, channels, channels, 1)
        self.k = Conv2d(rng, channels, channels, 1)
        self.v = Conv2d(rng, channels, channels, 1)
        self.proj = Conv2d(rng, channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        n, c, h, w = x.shape
        if h * w > self.max_positions:
            raise ValueError(f"attention over {h}x{w} positions exceeds the cap of {self.max_positions}")
        hn = self.norm(x)
        q = T.transpose(T.reshape(self.q(hn), (n, c, h * w)), (0, 2, 1))
        k = T.reshape(self.k(hn), (n, c, h * w))
        v = T.reshape(self.v(hn), (n, c, h * w))
        attn = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(c)), axis=-1)
        out = T.reshape(T.matmul(v, T.transpose(attn, (0, 2, 1))), (n, c, h, w))
        y = x + self.proj(out)
        return T.reshape(y, y.shape[1:]) if squeeze else y


class Downsample(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.conv = Conv2d(rng, channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.conv = Conv2d(rng, channels, channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]
