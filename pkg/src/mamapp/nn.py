"""Parameter containers and the basic layers used by the model."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay=False`` exempts it from weight decay."""

    def __init__(self, data, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, decay={self.decay})"


class Module:
    """Base class: tracks parameters, buffers and submodules in definition order."""

    def __init__(self):
        self.training = True
        self._buffer_names: list[str] = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, keyed by dotted name."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = {name: (mod, attr) for prefix, mod in self.named_modules()
                   for attr in mod._buffer_names
                   for name in [f"{prefix}.{attr}" if prefix else attr]}
        missing = [k for k in list(own) + list(buffers) if k not in state]
        if missing:
            raise KeyError(f"state is missing tensors: {', '.join(missing)}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: expected {p.shape}, got {src.shape}")
            p.data = src.astype(p.dtype, copy=True)
        for name, (mod, attr) in buffers.items():
            cur = getattr(mod, attr)
            src = np.asarray(state[name])
            if src.shape != cur.shape:
                raise ValueError(f"shape mismatch for {name}: expected {cur.shape}, got {src.shape}")
            setattr(mod, attr, src.astype(cur.dtype, copy=True))

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer, e.g. to float64 for gradient checks."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for attr in mod._buffer_names:
                setattr(mod, attr, getattr(mod, attr).astype(dtype))
        return self


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(_fan_in_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = (Parameter(_fan_in_uniform(rng, (out_features,), in_features, dtype), decay=False)
                     if bias else None)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_fan_in_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(_fan_in_uniform(rng, (out_channels,), fan_in, dtype), decay=False)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.bias = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(np.ones(dim, dtype=dtype), decay=False)
        self.bias = Parameter(np.zeros(dim, dtype=dtype), decay=False)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class DepthwiseConv1d(Module):
    """Causal depthwise convolution; operates on ``[B, D, L]``."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(_fan_in_uniform(rng, (channels, kernel_size), kernel_size, dtype))
        self.bias = Parameter(_fan_in_uniform(rng, (channels,), kernel_size, dtype), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv1d(x, self.weight, self.bias)
