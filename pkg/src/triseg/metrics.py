"""Volumetric evaluation metrics: DSC, Hausdorff / 95th-percentile Hausdorff
surface distances, sensitivity, specificity.

Boundary voxels are foreground voxels with at least one background
face-neighbor (6-connectivity in 3D); everything outside the volume counts
as background, so a full-foreground volume has its boundary on the faces.
Distances are exact Euclidean, in voxel units (1 mm isotropic for this
dataset). Empty-mask conventions follow the usual challenge-evaluation
behavior and are exposed as arguments.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

# assigned when exactly one of (pred, gt) is empty; roughly the diagonal of
# the native volume grid
EMPTY_PENALTY_MM = 373.13


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class SurfaceDistanceSet:
    d_g_to_p: np.ndarray   # per ground-truth boundary voxel, mm
    d_p_to_g: np.ndarray


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} != gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def dsc(counts: ConfusionCounts) -> float:
    denom = counts.fp + 2 * counts.tp + counts.fn
    if denom == 0:
        return 1.0   # both masks empty: perfect agreement by convention
    return 2.0 * counts.tp / denom


def sensitivity(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fn
    if denom == 0:
        return 1.0   # nothing to detect
    return counts.tp / denom


def specificity(counts: ConfusionCounts) -> float:
    denom = counts.tn + counts.fp
    if denom == 0:
        return 1.0   # nothing to reject
    return counts.tn / denom


def boundary_voxels(mask) -> np.ndarray:
    """Foreground voxels with a background face-neighbor (or on the border)."""
    mask = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def surface_distances(gt_mask, pred_mask) -> SurfaceDistanceSet:
    """Nearest-boundary distances in both directions (exact Euclidean EDT)."""
    gb = boundary_voxels(gt_mask)
    pb = boundary_voxels(pred_mask)
    if not gb.any() or not pb.any():
        raise ShapeError("surface distances need nonempty boundaries on both sides")
    dist_to_p = ndimage.distance_transform_edt(~pb)
    dist_to_g = ndimage.distance_transform_edt(~gb)
    return SurfaceDistanceSet(
        d_g_to_p=dist_to_p[gb],
        d_p_to_g=dist_to_g[pb],
    )


def hausdorff(surfaces: SurfaceDistanceSet) -> float:
    return float(max(surfaces.d_g_to_p.max(), surfaces.d_p_to_g.max()))


def hausdorff95(surfaces: SurfaceDistanceSet) -> float:
    return float(max(
        np.percentile(surfaces.d_g_to_p, 95),
        np.percentile(surfaces.d_p_to_g, 95),
    ))


def evaluate_region(pred_mask, gt_mask, empty_penalty=EMPTY_PENALTY_MM) -> dict:
    """DSC, HD95, sensitivity and specificity for one binary region."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} != gt {gt.shape}")
    counts = confusion(pred, gt)
    pred_empty = not pred.any()
    gt_empty = not gt.any()
    if pred_empty and gt_empty:
        hd95 = 0.0
    elif pred_empty or gt_empty:
        hd95 = empty_penalty
    else:
        hd95 = hausdorff95(surface_distances(gt, pred))
    return {
        "dsc": dsc(counts),
        "hd95": hd95,
        "sensitivity": sensitivity(counts),
        "specificity": specificity(counts),
    }
