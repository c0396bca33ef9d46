"""Neighbourhood similarity matching and coarse-to-fine flow composition."""
from __future__ import annotations

import numpy as np

from .nn import Module, kaiming, zeros
from .ops import conv3d, leaky_relu, resize_trilinear, softmax, unfold3d, warp, window_offsets
from .tensor import ContractError, Tensor, concat


def relative_grid(k: int = 3) -> np.ndarray:
    """[k^3, 3] integer offsets of the search window, lexicographic in (d, h, w)."""
    return window_offsets(k)


def similarity_scores(F_f: Tensor, F_m: Tensor, k: int = 3) -> Tensor:
    """Softmax over <F_f(v), F_m(v + o)> for the k^3 offsets o around every voxel -> [D*H*W, k^3]."""
    if F_f.shape != F_m.shape:
        raise ContractError(f"feature shapes differ: {F_f.shape} vs {F_m.shape}")
    C, D, H, W = F_f.shape
    neigh = unfold3d(F_m, k)  # [C, M, k^3]
    logits = (F_f.reshape(C, D * H * W, 1) * neigh).sum(axis=0)
    return softmax(logits, axis=1)


def flow_from_scores(scores: Tensor, grid: np.ndarray, shape: tuple[int, int, int]) -> Tensor:
    """Expected window offset under the matching distribution, as a [3, D, H, W] flow."""
    G = np.asarray(grid, dtype=np.float64)
    # a convex combination of offsets cannot leave the window; the clip only
    # removes float rounding (rows summing to 1 + ulp) so the bound holds exactly
    out = np.clip(scores.data.astype(np.float64) @ G, G.min(axis=0), G.max(axis=0)).astype(scores.dtype)
    Gt = G.T.astype(scores.dtype)

    def backward(g):
        return (g @ Gt,)

    return Tensor._result(out, (scores,), backward).transpose().reshape(3, *shape)


def match_flow(F_f: Tensor, F_m: Tensor, k: int = 3) -> Tensor:
    return flow_from_scores(similarity_scores(F_f, F_m, k), relative_grid(k), F_f.shape[1:])


def upsample_flow(flow: Tensor) -> Tensor:
    """Double the spatial extents (trilinear) and the displacement values."""
    size = tuple(2 * n for n in flow.shape[1:])
    return resize_trilinear(flow, size) * 2.0


def compose(phi_hat: Tensor, delta: Tensor) -> Tensor:
    """out(x) = delta(x) + phi_hat(x + delta(x))."""
    if phi_hat.shape != delta.shape:
        raise ContractError(f"cannot compose flows of shape {phi_hat.shape} and {delta.shape}")
    return delta + warp(phi_hat, delta)


class ConvFlowHead(Module):
    """Two 3x3x3 convolutions on the concatenated fixed / warped-moving features.

    The output convolution starts at zero so the head initially predicts no motion.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, hidden: int = 16, k: int = 3):
        self.conv1_weight = kaiming(rng, (hidden, 2 * in_channels, k, k, k), 2 * in_channels * k**3)
        self.conv1_bias = zeros(hidden)
        self.conv2_weight = zeros((3, hidden, k, k, k))
        self.conv2_bias = zeros(3)

    def __call__(self, F_f: Tensor, F_m_warped: Tensor) -> Tensor:
        x = concat([F_f, F_m_warped], axis=0)
        x = leaky_relu(conv3d(x, self.conv1_weight, self.conv1_bias), 0.1)
        return conv3d(x, self.conv2_weight, self.conv2_bias)
