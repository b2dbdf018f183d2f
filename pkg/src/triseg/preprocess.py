"""Intensity pipeline: percentile clipping, per-slice z-scoring, min-max
scaling to [0,1], and center cropping with recorded offsets.

Bias-field correction is a declared hook only: inputs are assumed to be
pre-corrected upstream (bias_hook="external-precorrected") or used as-is.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CaseBundle, LabelVolume, ModalityVolume, REQUIRED_MODALITIES
from .errors import ConfigError, CropTooLarge, EmptyBrain

AXIAL_AXIS = 2


@dataclass
class PreprocessConfig:
    clip_lo_pct: float = 0.01
    clip_hi_pct: float = 0.99
    crop_shape: tuple = (190, 190, 140)
    bias_hook: str = "none"            # none | external-precorrected
    std_floor: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.clip_lo_pct < self.clip_hi_pct <= 1.0:
            raise ConfigError(
                f"clip percentiles must satisfy 0 <= lo < hi <= 1, got "
                f"({self.clip_lo_pct}, {self.clip_hi_pct})"
            )
        if self.bias_hook not in ("none", "external-precorrected"):
            raise ConfigError(f"unknown bias_hook {self.bias_hook!r}")
        self.crop_shape = tuple(int(c) for c in self.crop_shape)


@dataclass
class CropManifest:
    """Sidecar record needed to un-crop predictions back to source geometry."""

    original_shape: tuple
    crop_shape: tuple
    offsets: tuple

    def to_dict(self):
        return {
            "original_shape": list(self.original_shape),
            "crop_shape": list(self.crop_shape),
            "offsets": list(self.offsets),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["original_shape"]), tuple(d["crop_shape"]), tuple(d["offsets"])
        )

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def clip_percentiles(vol: ModalityVolume, cfg: PreprocessConfig) -> ModalityVolume:
    """Clamp nonzero intensities to their [lo, hi] percentile range.

    Percentiles are computed over nonzero (brain) voxels only; background
    zeros pass through unchanged.
    """
    v = vol.voxels
    nz = v[v != 0]
    if nz.size == 0:
        raise EmptyBrain(f"{vol.modality}: volume has no nonzero voxels")
    lo = np.percentile(nz, cfg.clip_lo_pct * 100.0)
    hi = np.percentile(nz, cfg.clip_hi_pct * 100.0)
    out = v.copy()
    mask = v != 0
    out[mask] = np.clip(v[mask], lo, hi)
    return ModalityVolume(out, vol.modality)


def zscore_slices(vol: ModalityVolume, axis: int = AXIAL_AXIS,
                  cfg: PreprocessConfig = None) -> ModalityVolume:
    """Standardize each 2D slice along `axis` to zero mean / unit std.

    Slices whose std falls below cfg.std_floor are zeroed (empty peripheral
    slices are common in skull-stripped volumes).
    """
    floor = cfg.std_floor if cfg is not None else 1e-6
    v = np.moveaxis(vol.voxels.astype(np.float64), axis, 0)
    out = np.empty_like(v)
    for k in range(v.shape[0]):
        sl = v[k]
        mu = sl.mean()
        sd = sl.std()
        out[k] = 0.0 if sd < floor else (sl - mu) / sd
    out = np.moveaxis(out, 0, axis)
    return ModalityVolume(out.astype(np.float32), vol.modality)


def minmax_scale(vol: ModalityVolume) -> ModalityVolume:
    """Affine map of the whole volume onto [0,1]; constant volumes go to 0."""
    v = vol.voxels.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo == 0:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return ModalityVolume(out.astype(np.float32), vol.modality)


def crop_offsets(src_shape, crop_shape):
    if any(c > s for s, c in zip(src_shape, crop_shape)):
        raise CropTooLarge(f"crop {crop_shape} exceeds source {src_shape}")
    return tuple((s - c) // 2 for s, c in zip(src_shape, crop_shape))


def _crop_array(arr, crop_shape):
    off = crop_offsets(arr.shape, crop_shape)
    sl = tuple(slice(o, o + c) for o, c in zip(off, crop_shape))
    return arr[sl], off


def crop_volume(vol, cfg: PreprocessConfig):
    """Center-crop a ModalityVolume or LabelVolume to cfg.crop_shape."""
    if isinstance(vol, LabelVolume):
        out, _ = _crop_array(vol.voxels, cfg.crop_shape)
        return LabelVolume(out.copy(), allowed=vol.allowed)
    out, _ = _crop_array(vol.voxels, cfg.crop_shape)
    return ModalityVolume(out.copy(), vol.modality)


def preprocess_case(bundle: CaseBundle, cfg: PreprocessConfig):
    """Run clip -> per-axial-slice z-score -> min-max -> crop on a case.

    Only the model's input modalities (T1ce, T2, FLAIR) are kept. Labels,
    when present, are cropped with the same offsets. Returns the processed
    bundle plus the CropManifest used to restore source geometry later.
    """
    offsets = crop_offsets(bundle.shape, cfg.crop_shape)
    manifest = CropManifest(
        original_shape=tuple(bundle.shape),
        crop_shape=tuple(cfg.crop_shape),
        offsets=offsets,
    )
    volumes = {}
    for mod in REQUIRED_MODALITIES:
        v = bundle.volumes[mod]
        v = clip_percentiles(v, cfg)
        v = zscore_slices(v, AXIAL_AXIS, cfg)
        v = minmax_scale(v)
        v = crop_volume(v, cfg)
        volumes[mod] = v

    labels = None
    if bundle.labels is not None:
        labels = crop_volume(bundle.labels, cfg)

    return bundle.with_(volumes=volumes, labels=labels), manifest


def uncrop_labels(cropped: np.ndarray, manifest: CropManifest) -> np.ndarray:
    """Place a cropped label array back into its original geometry (zeros pad)."""
    from .errors import GeometryMismatch

    if tuple(cropped.shape) != tuple(manifest.crop_shape):
        raise GeometryMismatch(
            f"cropped shape {cropped.shape} != manifest crop {manifest.crop_shape}"
        )
    out = np.zeros(manifest.original_shape, dtype=cropped.dtype)
    sl = tuple(
        slice(o, o + c) for o, c in zip(manifest.offsets, manifest.crop_shape)
    )
    out[sl] = cropped
    return out
