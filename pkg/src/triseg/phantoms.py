"""Synthetic BraTS-like cases: nested ellipsoidal tumors inside an
ellipsoidal brain, with per-modality region intensities plus Gaussian
noise. Ellipsoids (not spheres) so each plane sees a distinct
cross-section. Deterministic under seed.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .augment import fork_rng
from .data import CaseBundle, LabelVolume, ModalityVolume
from .errors import ConfigError

# region intensity per modality, arbitrary scanner-like units
DEFAULT_INTENSITIES = {
    "T1":    {"brain": 300.0, "edema": 260.0, "core": 220.0, "et": 360.0},
    "T1ce":  {"brain": 300.0, "edema": 280.0, "core": 200.0, "et": 520.0},
    "T2":    {"brain": 250.0, "edema": 430.0, "core": 380.0, "et": 300.0},
    "FLAIR": {"brain": 240.0, "edema": 480.0, "core": 330.0, "et": 310.0},
}


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    center: tuple = None                  # None -> volume center
    radii_et: tuple = (4.0, 5.0, 6.0)
    radii_tc: tuple = (8.0, 9.0, 10.0)
    radii_wt: tuple = (12.0, 14.0, 13.0)
    radii_brain: tuple = (28.0, 26.0, 27.0)
    intensities: dict = field(default_factory=lambda: DEFAULT_INTENSITIES)
    noise_std: float = 8.0
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.center is None:
            self.center = tuple((s - 1) / 2.0 for s in self.shape)
        for inner, outer, names in (
            (self.radii_et, self.radii_tc, "et/tc"),
            (self.radii_tc, self.radii_wt, "tc/wt"),
            (self.radii_wt, self.radii_brain, "wt/brain"),
        ):
            if not all(a < b for a, b in zip(inner, outer)):
                raise ConfigError(f"radii not strictly nested at {names}")
        for c, r, s in zip(self.center, self.radii_brain, self.shape):
            if c - r < 0 or c + r > s - 1:
                raise ConfigError("brain ellipsoid does not fit inside the volume")


def scaled_spec(shape, seed: int = 0, **overrides) -> PhantomSpec:
    """PhantomSpec with the default geometry scaled to another volume size."""
    factor = min(shape) / 64.0
    base = PhantomSpec()
    kw = dict(
        shape=tuple(shape),
        radii_et=tuple(r * factor for r in base.radii_et),
        radii_tc=tuple(r * factor for r in base.radii_tc),
        radii_wt=tuple(r * factor for r in base.radii_wt),
        radii_brain=tuple(r * factor for r in base.radii_brain),
        seed=seed,
    )
    kw.update(overrides)
    return PhantomSpec(**kw)


def _ellipsoid(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def make_phantom(spec: PhantomSpec, case_id: str = "phantom") -> CaseBundle:
    brain = _ellipsoid(spec.shape, spec.center, spec.radii_brain)
    wt = _ellipsoid(spec.shape, spec.center, spec.radii_wt)
    tc = _ellipsoid(spec.shape, spec.center, spec.radii_tc)
    et = _ellipsoid(spec.shape, spec.center, spec.radii_et)

    labels = np.zeros(spec.shape, dtype=np.int16)
    labels[wt] = 2            # edema ring
    labels[tc] = 1            # core ring
    labels[et] = 3            # enhancing center

    rng = fork_rng(spec.seed, (0,))
    volumes = {}
    for mod, levels in spec.intensities.items():
        v = np.zeros(spec.shape, dtype=np.float64)
        v[brain] = levels["brain"]
        v[labels == 2] = levels["edema"]
        v[labels == 1] = levels["core"]
        v[labels == 3] = levels["et"]
        if spec.noise_std > 0:
            noise = rng.normal(0.0, spec.noise_std, size=spec.shape)
            v[brain] += noise[brain]
        volumes[mod] = ModalityVolume(v.astype(np.float32), mod)

    return CaseBundle(case_id=case_id, volumes=volumes,
                      labels=LabelVolume(labels))


def write_phantom_dataset(root, n_cases: int = 4, spec: PhantomSpec = None,
                          seed: int = 0):
    """Emit phantoms in the BraTS directory layout plus a clinical CSV.

    Returns the list of case ids. Geometry varies slightly per case so the
    dataset is not degenerate.
    """
    root = Path(root)
    spec = spec or PhantomSpec()
    rng = fork_rng(seed, (99,))
    suffix = {"T1": "t1", "T1ce": "t1ce", "T2": "t2", "FLAIR": "flair"}
    case_ids = []
    rows = []
    # keep the jittered whole-tumor strictly inside the brain ellipsoid
    headroom = min(b / w for b, w in zip(spec.radii_brain, spec.radii_wt))
    jitter_hi = min(1.1, 0.98 * headroom)
    jitter_lo = min(0.9, jitter_hi)
    for i in range(n_cases):
        case_id = f"PHANTOM_{i:03d}"
        jitter = rng.uniform(jitter_lo, jitter_hi)
        case_spec = PhantomSpec(
            shape=spec.shape,
            radii_et=tuple(r * jitter for r in spec.radii_et),
            radii_tc=tuple(r * jitter for r in spec.radii_tc),
            radii_wt=tuple(r * jitter for r in spec.radii_wt),
            radii_brain=spec.radii_brain,
            intensities=spec.intensities,
            noise_std=spec.noise_std,
            seed=seed + i,
        )
        bundle = make_phantom(case_spec, case_id)
        case_dir = root / case_id
        for mod, vol in bundle.volumes.items():
            nifti.write(case_dir / f"{case_id}_{suffix[mod]}.nii.gz", vol.voxels)
        raw = bundle.labels.voxels.copy()
        raw[raw == 3] = 4
        nifti.write(case_dir / f"{case_id}_seg.nii.gz", raw.astype(np.uint8))
        rows.append([case_id, round(float(rng.uniform(40, 75)), 1),
                     int(rng.integers(80, 700)), "GTR"])
        case_ids.append(case_id)

    with open(root / "survival_info.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "age", "survival_days", "resection_status"])
        writer.writerows(rows)
    return case_ids
