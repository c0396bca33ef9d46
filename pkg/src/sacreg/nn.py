"""Parameter containers and initialisers shared by the network components."""
from __future__ import annotations

import numpy as np

from .ops import leaky_relu, linear
from .tensor import Tensor


class Module:
    """Tiny parameter registry: attributes that are Tensors or Modules are parameters/children."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{key}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.1) -> Tensor:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    return Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class MLP(Module):
    """Two-layer perceptron: linear -> leaky_relu -> linear.

    The output layer starts near zero (``out_std``) so the block begins close to
    its unmodulated behaviour while every weight still receives gradient.
    """

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int, out_std: float = 1e-3):
        self.w1 = kaiming(rng, (n_hidden, n_in), n_in)
        self.b1 = zeros(n_hidden)
        self.w2 = Tensor(rng.normal(0.0, out_std, size=(n_out, n_hidden)), requires_grad=True)
        self.b2 = zeros(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(leaky_relu(linear(x, self.w1, self.b1), 0.1), self.w2, self.b2)
