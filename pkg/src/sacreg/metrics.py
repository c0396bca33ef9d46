"""Segmentation overlap, surface distance and deformation-regularity metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from .ops import warp_nearest


@dataclass
class MetricReport:
    dice: dict[int, float] = field(default_factory=dict)
    mean_dice: float = math.nan
    hd95: float = math.nan
    assd: float = math.nan
    folding_pct: float = math.nan
    mean_epe: float = math.nan


def _labels(x) -> np.ndarray:
    return np.rint(np.asarray(getattr(x, "data", x))).astype(np.int64)


def dice(labels_a, labels_b, label_set=None) -> tuple[dict[int, float], float]:
    """Per-label Dice and their mean; labels absent from both volumes are skipped."""
    a, b = _labels(labels_a), _labels(labels_b)
    if label_set is None:
        label_set = sorted((set(np.unique(a)) | set(np.unique(b))) - {0})
    scores: dict[int, float] = {}
    for lab in label_set:
        ma, mb = a == lab, b == lab
        denom = int(ma.sum()) + int(mb.sum())
        if denom == 0:
            continue
        scores[int(lab)] = 2.0 * int((ma & mb).sum()) / denom
    mean = float(np.mean(list(scores.values()))) if scores else math.nan
    return scores, mean


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one 6-neighbour outside it (volume exterior counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=generate_binary_structure(3, 1), border_value=0)


def directed_surface_distances(surf_a: np.ndarray, surf_b: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from every boundary voxel of A to the nearest boundary voxel of B."""
    dist_to_b = distance_transform_edt(~surf_b, sampling=spacing)
    return dist_to_b[surf_a]


def surface_distances(labels_a, labels_b, label: int, spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """(HD95, ASSD) in mm for one label; NaNs when the label is missing from either volume.

    HD95 is the linearly interpolated 95th percentile of the pooled distances in
    both directions; ASSD is the mean of the two directed means.
    """
    a, b = _labels(labels_a) == label, _labels(labels_b) == label
    if not a.any() or not b.any():
        return math.nan, math.nan
    sa, sb = boundary(a), boundary(b)
    d_ab = directed_surface_distances(sa, sb, spacing)
    d_ba = directed_surface_distances(sb, sa, spacing)
    hd95 = float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    assd = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    return hd95, assd


def jacobian_determinant(flow) -> np.ndarray:
    """det(I + grad(flow)) at interior voxels via central differences, shape [D-2, H-2, W-2]."""
    v = np.asarray(getattr(flow, "vectors", getattr(flow, "data", flow)), dtype=np.float64)
    if v.ndim != 4 or v.shape[0] != 3 or min(v.shape[1:]) < 3:
        raise ValueError(f"flow must be [3, D, H, W] with extents >= 3, got {v.shape}")
    J = np.empty((3, 3) + tuple(n - 2 for n in v.shape[1:]))
    for ax in range(3):
        fwd = [slice(1, -1)] * 3
        bwd = [slice(1, -1)] * 3
        fwd[ax] = slice(2, None)
        bwd[ax] = slice(None, -2)
        for comp in range(3):
            J[comp, ax] = 0.5 * (v[comp][tuple(fwd)] - v[comp][tuple(bwd)])
            if comp == ax:
                J[comp, ax] += 1.0
    return np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))


def jacobian_folding(flow) -> float:
    """Percentage of interior voxels whose Jacobian determinant is negative."""
    det = jacobian_determinant(flow)
    return 100.0 * float((det < 0).sum()) / det.size


def endpoint_error(flow, gt_flow) -> float:
    a = np.asarray(getattr(flow, "vectors", getattr(flow, "data", flow)), dtype=np.float64)
    b = np.asarray(getattr(gt_flow, "vectors", getattr(gt_flow, "data", gt_flow)), dtype=np.float64)
    return float(np.sqrt(((a - b) ** 2).sum(axis=0)).mean())


def evaluate_case(flow, labels_m=None, labels_f=None, gt_flow=None, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """Metrics for one registered pair; label metrics compare warped moving labels with fixed labels."""
    vec = np.asarray(getattr(flow, "vectors", getattr(flow, "data", flow)))
    report = MetricReport(folding_pct=jacobian_folding(vec))
    if gt_flow is not None:
        report.mean_epe = endpoint_error(vec, gt_flow)
    if labels_m is not None and labels_f is not None:
        warped = warp_nearest(_labels(labels_m), vec)
        fixed = _labels(labels_f)
        report.dice, report.mean_dice = dice(warped, fixed)
        hd, asd = [], []
        for lab in report.dice:
            h, s = surface_distances(warped, fixed, lab, spacing)
            if not math.isnan(h):
                hd.append(h)
                asd.append(s)
        if hd:
            report.hd95, report.assd = float(np.mean(hd)), float(np.mean(asd))
    return report
