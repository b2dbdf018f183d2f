"""BraTS-style case ingestion, label conventions, and segmentation output.

Directory layout expected: ``<root>/<case_id>/<case_id>_<suffix>.nii.gz``
with suffixes t1, t1ce, t2, flair and an optional seg. Clinical data live
in ``<root>/survival_info.csv`` with columns
(case_id, age, survival_days, resection_status).

Axis convention throughout the package: axis 0 = sagittal, axis 1 =
coronal, axis 2 = axial. Raw label ids {0,1,2,4} are remapped to the
canonical contiguous set {0,1,2,3} on load; 3 is mapped back to 4 when a
segmentation is saved.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import nifti
from .errors import (
    CorruptVolume,
    GeometryMismatch,
    InvalidLabel,
    IoError,
    MissingModality,
)

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
REQUIRED_MODALITIES = ("T1ce", "T2", "FLAIR")
_SUFFIX = {"T1": "t1", "T1ce": "t1ce", "T2": "t2", "FLAIR": "flair"}

RAW_LABELS = frozenset({0, 1, 2, 4})
CANONICAL_LABELS = frozenset({0, 1, 2, 3})

CLINICAL_CSV = "survival_info.csv"


@dataclass
class ModalityVolume:
    voxels: np.ndarray          # 3D float array, (sag, cor, ax)
    modality: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise GeometryMismatch(
                f"{self.modality}: expected a 3D volume, got shape {self.voxels.shape}"
            )
        if not np.isfinite(self.voxels).all():
            raise CorruptVolume(f"{self.modality}: non-finite voxel values")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class LabelVolume:
    voxels: np.ndarray          # 3D integer array
    allowed: frozenset = CANONICAL_LABELS

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        present = set(np.unique(self.voxels).tolist())
        if not present <= self.allowed:
            raise InvalidLabel(
                f"unexpected label ids {sorted(present - self.allowed)}"
            )

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class RegionMasks:
    """Binary masks for the three evaluation regions; et <= tc <= wt."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray


@dataclass
class CaseBundle:
    case_id: str
    volumes: dict                       # modality -> ModalityVolume
    labels: Optional[LabelVolume] = None
    age: Optional[float] = None
    survival_days: Optional[float] = None
    resection_status: Optional[str] = None
    header: Optional[bytes] = field(default=None, repr=False)

    def __post_init__(self):
        missing = [m for m in REQUIRED_MODALITIES if m not in self.volumes]
        if missing:
            raise MissingModality(f"{self.case_id}: missing {', '.join(missing)}")
        shapes = {v.shape for v in self.volumes.values()}
        if len(shapes) != 1:
            raise GeometryMismatch(f"{self.case_id}: modality shapes differ: {shapes}")
        if self.labels is not None and self.labels.shape != next(iter(shapes)):
            raise GeometryMismatch(
                f"{self.case_id}: label shape {self.labels.shape} != volume shape"
            )

    @property
    def shape(self):
        return next(iter(self.volumes.values())).shape

    def with_(self, **kw):
        return replace(self, **kw)


def read_clinical_csv(path):
    """Parse the clinical CSV into {case_id: (age, survival_days, resection)}.

    Non-numeric survival entries (e.g. "ALIVE") yield survival_days=None so
    the case is still usable for segmentation.
    """
    df = pd.read_csv(path, dtype=str).fillna("")
    cols = {c.lower().strip(): c for c in df.columns}
    def col(*names):
        for n in names:
            if n in cols:
                return cols[n]
        return None

    id_col = col("case_id", "brats20id", "id")
    age_col = col("age")
    surv_col = col("survival_days", "survival")
    res_col = col("resection_status", "extent_of_resection")
    if id_col is None:
        raise IoError(f"{path}: no case id column")

    out = {}
    for _, row in df.iterrows():
        cid = row[id_col].strip()
        if not cid:
            continue
        age = _to_float(row[age_col]) if age_col else None
        surv = _to_float(row[surv_col]) if surv_col else None
        res = row[res_col].strip() or None if res_col else None
        out[cid] = (age, surv, res)
    return out


def _to_float(s):
    try:
        return float(str(s).strip())
    except (TypeError, ValueError):
        return None


def load_case(root_dir, case_id, clinical=None):
    """Load one case directory into a CaseBundle.

    `clinical` may be a pre-parsed dict from read_clinical_csv; otherwise the
    root-level CSV is consulted when present.
    """
    root = Path(root_dir)
    case_dir = root / case_id
    volumes = {}
    header = None
    for mod in MODALITIES:
        path = case_dir / f"{case_id}_{_SUFFIX[mod]}.nii.gz"
        if not path.exists():
            path = case_dir / f"{case_id}_{_SUFFIX[mod]}.nii"
        if not path.exists():
            if mod in REQUIRED_MODALITIES:
                raise MissingModality(f"{case_id}: no {mod} volume in {case_dir}")
            continue
        arr, hdr = nifti.read(path)
        if not np.isfinite(arr).all():
            raise CorruptVolume(f"{case_id}: {mod} contains non-finite voxels")
        volumes[mod] = ModalityVolume(arr.astype(np.float32), mod)
        if header is None:
            header = hdr

    labels = None
    seg_path = case_dir / f"{case_id}_seg.nii.gz"
    if not seg_path.exists():
        seg_path = case_dir / f"{case_id}_seg.nii"
    if seg_path.exists():
        seg, _ = nifti.read(seg_path)
        labels = remap_labels(LabelVolume(seg.astype(np.int16), allowed=RAW_LABELS))

    age = survival = resection = None
    if clinical is None:
        csv_path = root / CLINICAL_CSV
        clinical = read_clinical_csv(csv_path) if csv_path.exists() else {}
    if case_id in clinical:
        age, survival, resection = clinical[case_id]

    return CaseBundle(
        case_id=case_id,
        volumes=volumes,
        labels=labels,
        age=age,
        survival_days=survival,
        resection_status=resection,
        header=header,
    )


def list_cases(root_dir):
    """Case ids under a BraTS-style root, sorted."""
    root = Path(root_dir)
    return sorted(
        d.name for d in root.iterdir()
        if d.is_dir() and any(d.glob(f"{d.name}_*.nii*"))
    )


def remap_labels(raw: LabelVolume) -> LabelVolume:
    """Raw BraTS ids {0,1,2,4} -> canonical {0,1,2,3} (4 becomes 3)."""
    present = set(np.unique(raw.voxels).tolist())
    if not present <= RAW_LABELS:
        raise InvalidLabel(f"unexpected raw ids {sorted(present - RAW_LABELS)}")
    out = raw.voxels.copy()
    out[out == 4] = 3
    return LabelVolume(out, allowed=CANONICAL_LABELS)


def derive_region_masks(canonical: LabelVolume) -> RegionMasks:
    """Whole tumor = {1,2,3}, tumor core = {1,3}, enhancing tumor = {3}."""
    v = canonical.voxels
    return RegionMasks(
        wt=np.isin(v, (1, 2, 3)),
        tc=np.isin(v, (1, 3)),
        et=(v == 3),
    )


def save_segmentation(case_id, canonical: LabelVolume, out_dir, header=None):
    """Write a canonical label volume back in BraTS convention (3 -> 4)."""
    out = canonical.voxels.astype(np.int16).copy()
    out[out == 3] = 4
    path = Path(out_dir) / f"{case_id}_seg.nii.gz"
    return nifti.write(path, out.astype(np.uint8), header=header)
