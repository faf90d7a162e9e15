"""Module containers and the small set of layers the networks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            p.assign(state[name])

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``x @ W + b`` over the last axis; also serves as a 1x1 pointwise conv."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.rate, self.rng, self.training)


class DepthwiseConv1d(Module):
    """Per-channel convolution along time for inputs laid out (..., time, channels)."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ad.ConfigError(f"kernel size must be odd, got {kernel_size}")
        self.kernel = Parameter(uniform_init(rng, (channels, kernel_size), kernel_size))
        self.bias = Parameter(uniform_init(rng, (channels,), kernel_size))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.depthwise_conv1d(ad.swapaxes(x, -1, -2), self.kernel)
        return ad.swapaxes(y, -1, -2) + self.bias


def zero_biases(module: Module) -> None:
    """Set every bias/beta parameter to zero (handy for analytic checks)."""
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            p.assign(np.zeros_like(p.data))

