"""Minimal module system: named parameters, buffers and train/infer modes."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ContractViolation
from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{key}{i + 1}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, child in self._children():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(child, Parameter):
                yield name, child
            else:
                yield from child.named_parameters(name)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in getattr(self, "_buffers", {}).items():
            yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}.{key}" if prefix else key)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def parameter_table(self) -> List[Tuple[str, tuple, int]]:
        return [(name, p.shape, p.data.size) for name, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise ContractViolation(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ContractViolation(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()
            p.zero_grad()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for m in self.modules():
            bufs = getattr(m, "_buffers", None)
            if bufs:
                for key in bufs:
                    bufs[key] = bufs[key].astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32):
        self.stride, self.padding = stride, padding
        self.weight = Parameter(np.zeros((out_ch, in_ch, k, k), dtype=dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32):
        self.stride, self.padding = stride, padding
        self.weight = Parameter(np.zeros((in_ch, out_ch, k, k), dtype=dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers = OrderedDict(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training,
                             self.momentum, self.eps)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 dtype=np.float32):
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


def name_parameters(module: Module, prefix: str) -> None:
    """Stamp dotted attribute paths (``gen.enc3.weight``) onto parameters."""
    seen = set()
    for name, p in module.named_parameters(prefix):
        if name in seen:
            raise ContractViolation(f"duplicate parameter name {name}")
        seen.add(name)
        p.name = name


def init_normal(module: Module, rng: np.random.Generator, std: float = 0.02) -> None:
    """Normal(0, std) conv/dense weights, zero biases, batchnorm gamma ~ Normal(1, std)."""
    for m in module.modules():
        if isinstance(m, (Conv2d, ConvTranspose2d, Dense)):
            m.weight.data = rng.normal(0.0, std, m.weight.shape).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data[...] = 0
        elif isinstance(m, BatchNorm2d):
            m.weight.data = rng.normal(1.0, std, m.weight.shape).astype(m.weight.dtype)
            m.bias.data[...] = 0


def init_he(module: Module, rng: np.random.Generator) -> None:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    for m in module.modules():
        if isinstance(m, (Conv2d, Dense)):
            fan_in = int(np.prod(m.weight.shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            m.weight.data = rng.normal(0.0, std, m.weight.shape).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data[...] = 0
