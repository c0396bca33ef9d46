"""Spatial context estimation: patch descriptors, KMeans partitioning and centroids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import unfold3d
from .tensor import ContractError, Tensor

MODES = ("spatial", "channel", "mix")


@dataclass
class ClusterMap:
    assignments: np.ndarray  # [D, H, W] ints in [0, N)
    centroids: np.ndarray  # KMeans centroids in descriptor space
    sizes: np.ndarray
    objective: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    @property
    def flat(self) -> np.ndarray:
        return self.assignments.reshape(-1)


def spatial_context(F: Tensor | np.ndarray, k: int = 3, mode: str = "spatial") -> np.ndarray:
    """Per-voxel descriptors [D*H*W, width] from unfolded k^3 patches.

    ``spatial`` averages each channel over the patch (width C), ``channel``
    averages each patch offset over channels (width k^3), ``mix`` concatenates both.
    Computed on detached data; descriptors only steer the partition.
    """
    if mode not in MODES:
        raise ContractError(f"unknown descriptor mode {mode!r}, expected one of {MODES}")
    data = F.data if isinstance(F, Tensor) else np.asarray(F)
    patches = unfold3d(Tensor(data), k).data  # [C, M, k^3]
    parts = []
    if mode in ("spatial", "mix"):
        parts.append(patches.mean(axis=2).T)
    if mode in ("channel", "mix"):
        parts.append(patches.mean(axis=0))
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    M = X.shape[0]
    centres = [X[rng.integers(M)]]
    closest = ((X - centres[0]) ** 2).sum(1)
    for _ in range(1, n):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(M)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total)))
            idx = min(idx, M - 1)
        centres.append(X[idx])
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(1))
    return np.stack(centres)


def kmeans(
    descriptors: np.ndarray,
    n_clusters: int,
    max_iter: int = 25,
    tol: float = 1e-4,
    seed: int = 0,
    init: np.ndarray | None = None,
    grid_shape: tuple[int, int, int] | None = None,
) -> ClusterMap:
    """Lloyd's algorithm from k-means++ seeding (or ``init`` for warm starts).

    Empty clusters are re-seeded at the point farthest from its centroid; any
    cluster still empty at the end is dropped and labels are renumbered.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"descriptors must be [M, width], got {X.shape}")
    M = X.shape[0]
    if n_clusters < 1 or M < n_clusters:
        raise ContractError(f"need 1 <= N <= M, got N={n_clusters}, M={M}")
    rng = np.random.default_rng(seed)
    if init is not None and init.shape == (n_clusters, X.shape[1]):
        C = np.array(init, dtype=np.float64)
    else:
        C = kmeans_pp_init(X, n_clusters, rng)

    objective: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        assign = d.argmin(axis=1)
        best = d[np.arange(M), assign]
        objective.append(float(best.sum()))
        counts = np.bincount(assign, minlength=n_clusters)
        for n in np.flatnonzero(counts == 0):
            far = int(best.argmax())
            C[n] = X[far]
            assign[far] = n
            best[far] = 0.0
            counts = np.bincount(assign, minlength=n_clusters)
        newC = np.stack([np.bincount(assign, weights=X[:, j], minlength=n_clusters) for j in range(X.shape[1])], axis=1)
        live = counts > 0
        newC[live] /= counts[live, None]
        newC[~live] = C[~live]
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        C = newC
        if shift < tol:
            break

    d = _sq_dists(X, C)
    assign = d.argmin(axis=1)
    counts = np.bincount(assign, minlength=n_clusters)
    keep = np.flatnonzero(counts > 0)
    if keep.size < n_clusters:
        remap = np.full(n_clusters, -1)
        remap[keep] = np.arange(keep.size)
        assign = remap[assign]
        C = C[keep]
        counts = counts[keep]
    shape = grid_shape if grid_shape is not None else (M,)
    return ClusterMap(assign.reshape(shape), C, counts, objective, it)


def cluster_centroids(F_flat: Tensor, assignments: np.ndarray, n_clusters: int | None = None) -> Tensor:
    """Mean of the original feature rows of each cluster, [N, C]; assignments are constants."""
    a = np.asarray(assignments).reshape(-1)
    M, C = F_flat.shape
    if a.shape[0] != M:
        raise ContractError(f"{a.shape[0]} assignments for {M} feature rows")
    n = int(a.max()) + 1 if n_clusters is None else int(n_clusters)
    counts = np.bincount(a, minlength=n)
    if np.any(counts == 0):
        raise ContractError("cluster_centroids received an empty cluster")
    inv = (1.0 / counts).astype(F_flat.dtype)
    sums = np.stack([np.bincount(a, weights=F_flat.data[:, j], minlength=n) for j in range(C)], axis=1)
    out = (sums * inv[:, None]).astype(F_flat.dtype)

    def backward(g):
        return ((g * inv[:, None])[a],)

    return Tensor._result(out, (F_flat,), backward)


def cluster_features(
    F: Tensor,
    n_clusters: int = 7,
    mode: str = "spatial",
    k: int = 3,
    max_iter: int = 25,
    tol: float = 1e-4,
    seed: int = 0,
    init: np.ndarray | None = None,
    detach_centroids: bool = False,
) -> tuple[ClusterMap, Tensor]:
    """Partition the voxels of F [C, D, H, W] and return (cluster map, centroids [N, C])."""
    C, D, H, W = F.shape
    desc = spatial_context(F, k, mode)
    n = min(n_clusters, D * H * W)
    cmap = kmeans(desc, n, max_iter, tol, seed, init=init, grid_shape=(D, H, W))
    flat = F.reshape(C, D * H * W).transpose()
    if detach_centroids:
        flat = flat.detach()
    return cmap, cluster_centroids(flat, cmap.flat, cmap.n_clusters)
