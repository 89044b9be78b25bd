"""Parameter containers and the three parameterized layers the network uses.

A ``Module`` tracks child modules, parameters and non-learned buffers by
attribute assignment, which gives every tensor a stable dotted name.  Those
names are the checkpoint vocabulary, so registration order matters and is
simply Python attribute order.

Initialization draws from an explicit ``numpy`` generator passed to each
constructor; building the same architecture twice from generators with the
same seed produces bit-identical parameters.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError


def _fan_in_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    std = float(np.sqrt(2.0 / fan_in))
    data = rng.normal(0.0, std, size=shape).astype(ag.default_dtype())
    return Tensor(data, requires_grad=True)


class Module:
    """Base class: attribute assignment registers children and parameters."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._modules.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: np.array(p.data, copy=True) for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = np.array(b, copy=True)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = set(own_params) | set(own_buffers)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            surplus = sorted(got - expected)
            raise ContractError(f"state mismatch: missing {missing}, unexpected {surplus}")
        for name, value in state.items():
            target = own_params[name].data if name in own_params else own_buffers[name]
            if target.shape != value.shape:
                raise DimensionError(
                    f"state entry {name}: shape {value.shape} does not match {target.shape}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for item in items:
            self.append(item)

    def append(self, item: Module) -> None:
        setattr(self, str(len(self._items)), item)
        self._items.append(item)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, idx):
        return self._items[idx]

    def __len__(self):
        return len(self._items)


class Sequential(Module):
    def __init__(self, *steps: Module):
        super().__init__()
        self._steps = []
        for step in steps:
            setattr(self, str(len(self._steps)), step)
            self._steps.append(step)

    def forward(self, x: Tensor) -> Tensor:
        for step in self._steps:
            x = step(x)
        return x


class ReLU(Module):
    def __init__(self):
        super().__init__()

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(x)


class Sigmoid(Module):
    def __init__(self):
        super().__init__()

    def forward(self, x: Tensor) -> Tensor:
        return ag.sigmoid(x)


class Conv2d(Module):
    """2-D convolution; padding defaults to the odd-kernel "same" amount."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 rng: np.random.Generator, stride: int = 1, padding: int | None = None,
                 bias: bool = True):
        super().__init__()
        if kernel_size < 1:
            raise ContractError(f"kernel size must be positive, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _fan_in_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=ag.default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        out = ag.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, self.out_channels, 1, 1)
        return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _fan_in_normal(rng, (out_features, in_features), in_features)
        if bias:
            self.bias = Tensor(np.zeros(out_features, dtype=ag.default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.weight.transpose(1, 0))
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm2d(Module):
    """Per-channel normalization with running statistics for inference.

    Training mode normalizes by the biased batch variance; the running
    buffers blend in each batch with the configured momentum and are the
    statistics used in eval mode.
    """

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=ag.default_dtype()), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=ag.default_dtype()), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=ag.default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=ag.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"batchnorm2d expects rank 4, got {x.ndim}")
        if x.shape[1] != self.channels:
            raise DimensionError(f"batchnorm2d built for {self.channels} channels, got {x.shape[1]}")
        c = self.channels
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.reshape(c)
            self.running_var[...] = (1 - m) * self.running_var + m * var.data.reshape(c)
            inv = (var + self.eps) ** -0.5
            xhat = centered * inv
        else:
            mu = Tensor(self.running_mean.reshape(1, c, 1, 1))
            inv = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, c, 1, 1))
            xhat = (x - mu) * inv
        return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)
