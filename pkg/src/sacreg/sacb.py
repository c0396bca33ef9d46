"""Spatial-awareness convolution block: per-cluster adaptive kernels applied residually."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterMap, cluster_features
from .nn import MLP, Module, kaiming
from .ops import grouped_linear, leaky_relu, unfold3d
from .tensor import ContractError, Tensor, tanh


@dataclass
class ClusterConfig:
    n_clusters: int = 7
    mode: str = "spatial"
    k: int = 3
    max_iter: int = 25
    tol: float = 1e-4
    seed: int = 0
    detach_centroids: bool = False
    warm_start: bool = False


@dataclass
class AdaptiveKernelSet:
    weights: Tensor  # [N, C_out, C_in * k^3]
    biases: Tensor  # [N, C_out]

    @property
    def n(self) -> int:
        return self.weights.shape[0]


class SACB(Module):
    def __init__(self, rng: np.random.Generator, channels: int, k: int = 3, hidden: int | None = None):
        c = channels
        hidden = hidden or 4 * c
        self.k = k
        self.channels = c
        self.weight = kaiming(rng, (c, c, k**3), c * k**3)
        self.kernel_mlp = MLP(rng, c, hidden, c * c * k**3)
        self.bias_mlp = MLP(rng, c, hidden, c)
        self._warm: dict[str, np.ndarray] = {}

    def adaptive_kernels(self, centroids: Tensor) -> AdaptiveKernelSet:
        """W_n = (1 + tanh(F_w(S_n^c))) * W and b_n = F_b(S_n^c) for every centroid row."""
        n = centroids.shape[0]
        c, kk = self.channels, self.k**3
        if centroids.ndim != 2 or centroids.shape[1] != c:
            raise ContractError(f"centroids must be [N, {c}], got {centroids.shape}")
        mod = 1.0 + tanh(self.kernel_mlp(centroids))
        weights = mod.reshape(n, c, c * kk) * self.weight.reshape(1, c, c * kk)
        return AdaptiveKernelSet(weights, self.bias_mlp(centroids))

    def sac(self, F: Tensor, cmap: ClusterMap, kernels: AdaptiveKernelSet) -> Tensor:
        return sac_apply(F, cmap, kernels, self.k)

    def __call__(self, F: Tensor, cfg: ClusterConfig, stream: str = "") -> tuple[Tensor, ClusterMap]:
        """Refined features F + leaky_relu(SAC(F)) and the partition used to produce them."""
        init = self._warm.get(stream) if cfg.warm_start else None
        cmap, centroids = cluster_features(
            F, cfg.n_clusters, cfg.mode, cfg.k, cfg.max_iter, cfg.tol, cfg.seed, init, cfg.detach_centroids
        )
        if cfg.warm_start and cmap.n_clusters == cfg.n_clusters:
            self._warm[stream] = cmap.centroids
        kernels = self.adaptive_kernels(centroids)
        return F + leaky_relu(self.sac(F, cmap, kernels), 0.1), cmap


def sac_apply(F: Tensor, cmap: ClusterMap, kernels: AdaptiveKernelSet, k: int = 3) -> Tensor:
    """Convolve each voxel's replicate-padded patch with the kernel of its own cluster."""
    C, D, H, W = F.shape
    a = np.asarray(cmap.assignments).reshape(-1)
    if a.size != D * H * W:
        raise ContractError(f"assignments cover {a.size} voxels, features have {D * H * W}")
    if a.max() >= kernels.n:
        raise ContractError(f"assignment index {a.max()} >= number of kernels {kernels.n}")
    patches = unfold3d(F, k).transpose(1, 0, 2).reshape(D * H * W, C * k**3)
    out = grouped_linear(patches, kernels.weights, kernels.biases, a)
    return out.transpose().reshape(kernels.weights.shape[1], D, H, W)
