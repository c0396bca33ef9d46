from __future__ import annotations

import numpy as np

from .nn import Module, kaiming, ones, zeros
from .ops import avg_pool3d, conv3d, instance_norm, leaky_relu
from .tensor import ContractError, Tensor

DEFAULT_CHANNELS = (8, 16, 16, 32, 32)
N_LEVELS = 5


class ConvBlock(Module):
    """conv3d(k, replicate pad) -> instance norm -> leaky_relu(0.1)."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3):
        self.weight = kaiming(rng, (cout, cin, k, k, k), cin * k**3)
        self.bias = zeros(cout)
        self.norm_scale = ones(cout)
        self.norm_shift = zeros(cout)

    def __call__(self, x: Tensor) -> Tensor:
        y = conv3d(x, self.weight, self.bias)
        y = instance_norm(y, self.norm_scale, self.norm_shift)
        return leaky_relu(y, 0.1)


class Encoder(Module):
    """Five conv blocks separated by 2x average pooling; one instance serves both images."""

    def __init__(self, rng: np.random.Generator, channels=DEFAULT_CHANNELS, in_channels: int = 1, k: int = 3):
        channels = tuple(int(c) for c in channels)
        if len(channels) != N_LEVELS:
            raise ContractError(f"channel plan needs {N_LEVELS} entries, got {channels}")
        self.channels = channels
        cins = (in_channels,) + channels[:-1]
        self.blocks = [ConvBlock(rng, ci, co, k) for ci, co in zip(cins, channels)]

    def __call__(self, volume: Tensor) -> list[Tensor]:
        """Feature pyramid for a [C, D, H, W] volume; index 0 is full resolution (scale 1)."""
        if volume.ndim != 4:
            raise ContractError(f"encoder expects [C, D, H, W], got {volume.shape}")
        if any(n % 2 ** (N_LEVELS - 1) for n in volume.shape[1:]):
            raise ContractError(f"spatial extents {volume.shape[1:]} must be divisible by 16")
        levels = []
        x = volume
        for i, block in enumerate(self.blocks):
            if i:
                x = avg_pool3d(x, 2)
            x = block(x)
            levels.append(x)
        return levels
