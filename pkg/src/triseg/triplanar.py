"""Plane slicing, per-plane 2D inference, restacking, and cross-plane fusion.

Canonical axes: sagittal = 0, coronal = 1, axial = 2. Slices carry the
fixed channel order (T1ce, T2, FLAIR).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import CaseBundle, LabelVolume
from .errors import GeometryMismatch, ShapeError
from .preprocess import CropManifest, uncrop_labels

PLANES = ("sagittal", "coronal", "axial")
PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
CHANNEL_ORDER = ("T1ce", "T2", "FLAIR")


@dataclass
class PlanarSlab:
    """A stack of contiguous multi-channel slices along one plane axis."""

    plane: str
    start_index: int
    data: np.ndarray                 # (slab, 3, H, W)
    labels: Optional[np.ndarray] = None   # (slab, H, W)


@dataclass
class ProbabilityVolume:
    probs: np.ndarray                # (C, X, Y, Z)

    def __post_init__(self):
        p = self.probs
        if p.ndim != 4:
            raise ShapeError(f"expected (C,X,Y,Z), got {p.shape}")
        sums = p.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-4):
            raise ShapeError("per-voxel channel sums deviate from 1")

    @property
    def shape(self):
        return self.probs.shape


def _channel_stack(case: CaseBundle) -> np.ndarray:
    return np.stack([case.volumes[m].voxels for m in CHANNEL_ORDER])  # (3,X,Y,Z)


def slice_plane(case: CaseBundle, plane: str) -> np.ndarray:
    """All slices of a preprocessed case along one plane, (n, 3, H, W)."""
    axis = PLANE_AXIS[plane]
    stack = _channel_stack(case)
    return np.ascontiguousarray(np.moveaxis(stack, axis + 1, 0))


def slice_labels(case: CaseBundle, plane: str) -> np.ndarray:
    if case.labels is None:
        raise GeometryMismatch(f"{case.case_id}: case has no labels")
    axis = PLANE_AXIS[plane]
    return np.ascontiguousarray(np.moveaxis(case.labels.voxels, axis, 0))


def restack(slices: np.ndarray, plane: str) -> np.ndarray:
    """Inverse of slice_plane: (n, C, H, W) -> (C, X, Y, Z)."""
    axis = PLANE_AXIS[plane]
    return np.ascontiguousarray(np.moveaxis(slices, 0, axis + 1))


def infer_plane(case: CaseBundle, plane: str, model,
                batch_size: int = 8) -> ProbabilityVolume:
    """Run every slice of the plane through the model and restack to 3D."""
    slices = slice_plane(case, plane)
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(slices), batch_size):
            batch = torch.from_numpy(slices[i:i + batch_size]).float()
            outs.append(model(batch).numpy())
    probs = restack(np.concatenate(outs, axis=0), plane)
    return ProbabilityVolume(probs)


def fuse(volumes) -> ProbabilityVolume:
    """Voxelwise mean of probability volumes.

    Computed as min + mean(offsets from min) on the per-voxel sorted stack:
    this form is exactly permutation-invariant (sorting) and exactly
    idempotent on identical inputs (offsets are 0.0), which a naive mean is
    not in floating point.
    """
    arrays = [v.probs if isinstance(v, ProbabilityVolume) else np.asarray(v)
              for v in volumes]
    if len(arrays) == 0:
        raise ShapeError("fuse needs at least one volume")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"probability volume shapes differ: {shapes}")
    if len(arrays) == 1:
        return ProbabilityVolume(arrays[0].copy())
    stack = np.sort(np.stack(arrays), axis=0)
    base = stack[0]
    fused = base + (stack[1:] - base).sum(axis=0) / len(arrays)
    return ProbabilityVolume(fused)


def finalize(fused: ProbabilityVolume, manifest: CropManifest) -> LabelVolume:
    """Argmax to canonical labels, un-cropped back to source geometry.

    Ties break toward the lower class id (argmax returns the first max).
    """
    labels = np.argmax(fused.probs, axis=0).astype(np.int16)
    if tuple(labels.shape) != tuple(manifest.crop_shape):
        raise GeometryMismatch(
            f"probability volume {labels.shape} != manifest crop "
            f"{manifest.crop_shape}"
        )
    return LabelVolume(uncrop_labels(labels, manifest))
