from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import box_sum, warp
from .tensor import ContractError, Tensor, clamp_min, sqrt


@dataclass
class LossReport:
    total: Tensor
    sim: float
    reg: float
    lam: float

    def row(self) -> tuple[float, float, float]:
        return self.total.item(), self.sim, self.reg


def _as_image(x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(getattr(x, "data", x))
    return t.reshape(1, *t.shape) if t.ndim == 3 else t


def ncc_map(fixed, warped, w: int = 9, eps: float = 1e-5) -> Tensor:
    """Local normalised cross-correlation at every voxel over the in-bounds part of a w^3 window."""
    I, J = _as_image(fixed), _as_image(warped)
    if I.shape != J.shape:
        raise ContractError(f"image shapes differ: {I.shape} vs {J.shape}")
    if w % 2 == 0:
        raise ContractError(f"NCC window must be odd, got {w}")
    count = box_sum(Tensor(np.ones(I.shape, dtype=I.dtype)), w).data
    inv = 1.0 / count
    sI, sJ = box_sum(I, w), box_sum(J, w)
    sII, sJJ, sIJ = box_sum(I * I, w), box_sum(J * J, w), box_sum(I * J, w)
    cross = sIJ - sI * sJ * inv
    # float32 cancellation can push flat-window variances slightly negative
    var_i = clamp_min(sII - sI * sI * inv, 0.0)
    var_j = clamp_min(sJJ - sJ * sJ * inv, 0.0)
    return cross / sqrt(var_i * var_j + eps)


def ncc_loss(fixed, warped, w: int = 9, reduction: str = "sum", eps: float = 1e-5) -> Tensor:
    """Negative local NCC, summed over voxels (or averaged with ``reduction='mean'``)."""
    cc = ncc_map(fixed, warped, w, eps)
    if reduction == "sum":
        return -cc.sum()
    if reduction == "mean":
        return -cc.mean()
    raise ContractError(f"unknown reduction {reduction!r}")


def smoothness(flow: Tensor) -> Tensor:
    """Mean squared forward difference, averaged over the three spatial axes."""
    if flow.ndim != 4:
        raise ContractError(f"flow must be [3, D, H, W], got {flow.shape}")
    terms = []
    for ax in (1, 2, 3):
        n = flow.shape[ax]
        if n < 2:
            continue
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        diff = flow[tuple(hi)] - flow[tuple(lo)]
        terms.append((diff * diff).mean())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / 3.0)


def total_loss(moving, fixed, flow: Tensor, lam: float = 1.0, w: int = 9, reduction: str = "sum") -> LossReport:
    """NCC(fixed, moving warped by flow) + lam * smoothness(flow)."""
    warped = warp(_as_image(moving), flow)
    sim = ncc_loss(fixed, warped, w, reduction)
    reg = smoothness(flow)
    total = sim + reg * float(lam)
    return LossReport(total, sim.item(), reg.item(), float(lam))
