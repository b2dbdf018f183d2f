"""Stochastic 2D slice augmentation, deterministic under seeded generators.

Each transform fires independently with its configured probability, in the
fixed order: hflip, elastic, rotate, shift-scale-rotate, noise, blur.
Sampling is split from application: `sample_plan` draws what fires and with
which parameters, `apply_plan` executes it. Spatial transforms resample
image channels bilinearly and labels nearest-neighbor, with the same
sampled parameters for both.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GeometryMismatch


@dataclass
class AugmentConfig:
    p_hflip: float = 0.4
    p_elastic: float = 0.3
    p_rotate: float = 0.4
    p_shift_scale_rotate: float = 0.3
    p_gauss_noise: float = 0.2
    p_gauss_blur: float = 0.2
    rotate_limit_deg: float = 15.0
    shift_limit: float = 0.06          # fraction of extent
    scale_limit: float = 0.10
    elastic_max_disp: float = 0.05     # fraction of the smaller extent
    elastic_sigma: float = 8.0         # smoothing of displacement fields, px
    noise_std_max: float = 0.05        # on [0,1]-scaled intensities
    blur_sigma_range: tuple = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_elastic", "p_rotate",
                     "p_shift_scale_rotate", "p_gauss_noise", "p_gauss_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0,1]")


TRANSFORM_ORDER = ("hflip", "elastic", "rotate", "shift_scale_rotate",
                   "noise", "blur")


@dataclass
class TransformPlan:
    """Which transforms fire this draw, and with what parameters."""

    hflip: bool = False
    elastic: Optional[tuple] = None            # (dy, dx) displacement fields
    rotate: Optional[float] = None             # degrees
    shift_scale_rotate: Optional[tuple] = None  # (dy, dx, scale, degrees)
    noise: Optional[tuple] = None              # (std, field)
    blur: Optional[float] = None               # sigma

    def fired(self):
        return tuple(
            name for name in TRANSFORM_ORDER
            if getattr(self, name) not in (False, None)
        )


def fork_rng(seed, sample_index):
    """Independent deterministic stream per (seed, sample_index).

    sample_index may be an int or a tuple of ints (nested indexing).
    """
    key = (sample_index,) if isinstance(sample_index, int) else tuple(sample_index)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


_PROB_FIELD = {
    "hflip": "p_hflip",
    "elastic": "p_elastic",
    "rotate": "p_rotate",
    "shift_scale_rotate": "p_shift_scale_rotate",
    "noise": "p_gauss_noise",
    "blur": "p_gauss_blur",
}


def sample_plan(cfg: AugmentConfig, rng: np.random.Generator,
                spatial_shape) -> TransformPlan:
    h, w = spatial_shape
    fire = {name: rng.random() < getattr(cfg, _PROB_FIELD[name])
            for name in TRANSFORM_ORDER}
    plan = TransformPlan()
    if fire["hflip"]:
        plan.hflip = True
    if fire["elastic"]:
        plan.elastic = _elastic_fields(cfg, rng, h, w)
    if fire["rotate"]:
        plan.rotate = float(rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg))
    if fire["shift_scale_rotate"]:
        plan.shift_scale_rotate = (
            float(rng.uniform(-cfg.shift_limit, cfg.shift_limit) * h),
            float(rng.uniform(-cfg.shift_limit, cfg.shift_limit) * w),
            float(1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit)),
            float(rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg)),
        )
    if fire["noise"]:
        std = float(rng.uniform(0.0, cfg.noise_std_max))
        plan.noise = (std, rng.standard_normal((h, w)))
    if fire["blur"]:
        plan.blur = float(rng.uniform(*cfg.blur_sigma_range))
    return plan


def _elastic_fields(cfg, rng, h, w):
    """Smoothed random displacement fields, peak |disp| capped at the limit."""
    fields = []
    cap = cfg.elastic_max_disp * min(h, w)
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)),
                                    cfg.elastic_sigma, mode="constant")
        peak = np.abs(d).max()
        fields.append(d * (cap / peak) if peak > 0 else d)
    return tuple(fields)


def _warp(sl, coords, order):
    return ndimage.map_coordinates(sl, coords, order=order, mode="constant", cval=0.0)


def _apply_spatial(image, label, coords):
    image = np.stack([_warp(ch, coords, order=1) for ch in image])
    if label is not None:
        label = _warp(label, coords, order=0)
    return image, label


def _affine_coords(h, w, shift_y, shift_x, scale, degrees):
    """Output->input sampling grid for shift+scale+rotate about the center."""
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    y = yy - cy - shift_y
    x = xx - cx - shift_x
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # inverse of scale-then-rotate
    src_y = (cos_t * y + sin_t * x) / scale + cy
    src_x = (-sin_t * y + cos_t * x) / scale + cx
    return np.stack([src_y, src_x])


def apply_plan(image, label, plan: TransformPlan):
    image = np.asarray(image, dtype=np.float64)
    label = None if label is None else np.asarray(label)
    h, w = image.shape[-2:]

    if plan.hflip:
        image = image[..., ::-1].copy()
        if label is not None:
            label = label[..., ::-1].copy()
    if plan.elastic is not None:
        dy, dx = plan.elastic
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        coords = np.stack([yy + dy, xx + dx])
        image, label = _apply_spatial(image, label, coords)
    if plan.rotate is not None:
        coords = _affine_coords(h, w, 0.0, 0.0, 1.0, plan.rotate)
        image, label = _apply_spatial(image, label, coords)
    if plan.shift_scale_rotate is not None:
        coords = _affine_coords(h, w, *plan.shift_scale_rotate)
        image, label = _apply_spatial(image, label, coords)
    if plan.noise is not None:
        std, noise_field = plan.noise
        image = image + std * noise_field
    if plan.blur is not None:
        s = plan.blur
        image = np.stack([ndimage.gaussian_filter(ch, s) for ch in image])
    return image.astype(np.float32), label


def augment_pair(image, label, cfg: AugmentConfig, rng: np.random.Generator):
    """Augment one multi-channel image slice and its label slice together."""
    image = np.asarray(image)
    if label is not None and image.shape[-2:] != np.asarray(label).shape:
        raise GeometryMismatch(
            f"image spatial {image.shape[-2:]} != label {np.asarray(label).shape}"
        )
    plan = sample_plan(cfg, rng, image.shape[-2:])
    return apply_plan(image, label, plan)
