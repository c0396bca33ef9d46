"""Shared encoder + SACB-refined similarity-matching pyramid (scales 5..2) + conv head (scale 1)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import DEFAULT_CHANNELS, Encoder
from .matching import ConvFlowHead, compose, match_flow, upsample_flow
from .nn import Module
from .ops import warp
from .sacb import SACB, ClusterConfig
from .tensor import ContractError, Tensor

SACB_SCALES = (2, 3, 4, 5)


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    match_window: int = 3
    sacb_scales: tuple[int, ...] = SACB_SCALES
    share_streams: bool = True
    head_hidden: int = 16
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def __post_init__(self):
        self.sacb_scales = tuple(sorted(int(s) for s in self.sacb_scales))
        if not set(self.sacb_scales) <= set(SACB_SCALES):
            raise ContractError(f"sacb scales must be a subset of {SACB_SCALES}, got {self.sacb_scales}")


@dataclass
class ScaleDiagnostics:
    scale: int
    source: str  # "match" or "head"
    max_norm: float
    mean_norm: float
    max_abs_component: float
    n_clusters: dict = field(default_factory=dict)


def _stats(scale: int, source: str, delta: Tensor, clusters=None) -> ScaleDiagnostics:
    v = delta.data.astype(np.float64)
    norm = np.sqrt((v**2).sum(axis=0))
    return ScaleDiagnostics(scale, source, float(norm.max()), float(norm.mean()), float(np.abs(v).max()), clusters or {})


class SACBNet(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        self.encoder = Encoder(rng, ch)
        self.sacb = {}
        for s in cfg.sacb_scales:
            if cfg.share_streams:
                self.sacb[str(s)] = SACB(rng, ch[s - 1], k=cfg.cluster.k)
            else:
                self.sacb[f"{s}f"] = SACB(rng, ch[s - 1], k=cfg.cluster.k)
                self.sacb[f"{s}m"] = SACB(rng, ch[s - 1], k=cfg.cluster.k)
        self.head = ConvFlowHead(rng, ch[0], cfg.head_hidden)

    def _refine(self, scale: int, F: Tensor, stream: str, clusters: dict) -> Tensor:
        if scale not in self.config.sacb_scales:
            return F
        block = self.sacb[str(scale)] if self.config.share_streams else self.sacb[f"{scale}{stream}"]
        base = self.config.cluster
        cfg = ClusterConfig(**{**vars(base), "seed": base.seed + 97 * scale + (0 if stream == "f" else 1)})
        out, cmap = block(F, cfg, stream)
        clusters[stream] = cmap.n_clusters
        return out

    def __call__(self, moving: Tensor, fixed: Tensor) -> tuple[Tensor, list[ScaleDiagnostics]]:
        """Full-resolution displacement [3, D, H, W] mapping fixed-frame points into the moving image."""
        if moving.shape != fixed.shape:
            raise ContractError(f"moving {moving.shape} and fixed {fixed.shape} differ")
        k = self.config.match_window
        Fm = self.encoder(moving)
        Ff = self.encoder(fixed)
        diags: list[ScaleDiagnostics] = []

        clusters: dict = {}
        ff = self._refine(5, Ff[4], "f", clusters)
        fm = self._refine(5, Fm[4], "m", clusters)
        phi = match_flow(ff, fm, k)
        diags.append(_stats(5, "match", phi, clusters))
        for scale in (4, 3, 2):
            phi_hat = upsample_flow(phi)
            clusters = {}
            ff = self._refine(scale, Ff[scale - 1], "f", clusters)
            fm = self._refine(scale, warp(Fm[scale - 1], phi_hat), "m", clusters)
            delta = match_flow(ff, fm, k)
            diags.append(_stats(scale, "match", delta, clusters))
            phi = compose(phi_hat, delta)
        phi_hat = upsample_flow(phi)
        delta = self.head(Ff[0], warp(Fm[0], phi_hat))
        diags.append(_stats(1, "head", delta))
        return compose(phi_hat, delta), diags


def matching_bound(k: int = 3) -> float:
    """Largest full-resolution displacement per component the matching scales can produce."""
    r = k // 2
    return float(sum(r * 2 ** (s - 1) for s in (2, 3, 4, 5)))
