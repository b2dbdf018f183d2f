"""Survival-days regression from frozen segmentation encoders.

Per plane, the bottleneck activations of every slice are pushed through a
small two-conv feature head and globally average-pooled (over spatial dims
and all slices) into a 64-vector; the three plane vectors concatenate to a
192-feature descriptor. A small dense network (192 -> 64 -> 64 -> 28, then
age appended -> 29 -> 1) regresses survival days.

Ages and regression targets are z-scored with training-split statistics;
predictions are mapped back to days. Feature heads use a deterministic
seeded init and stay frozen while the dense head trains.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import fork_rng
from .errors import (
    ConfigError,
    InsufficientData,
    InvalidInput,
    MissingModel,
    ShapeError,
)
from .network import init_params
from .triplanar import PLANES, slice_plane

FEATURES_PER_PLANE = 64
FUSED_FEATURES = 192
ANN_WIDTHS = (192, 64, 64, 28)   # dense trunk; +age -> 29 -> 1


@dataclass
class SurvTrainConfig:
    train_fraction: float = 0.85
    epochs: int = 400
    lr: float = 1e-4
    batch_size: int = 16          # None -> full batch
    dropout: float = 0.3
    seed: int = 0
    class_thresholds: tuple = (300.0, 450.0)   # days: short < lo <= mid <= hi < long

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0,1)")
        lo, hi = self.class_thresholds
        if not lo < hi:
            raise ConfigError("class thresholds must be strictly increasing")


@dataclass
class SurvivalSample:
    case_id: str
    features: np.ndarray         # (192,)
    age: float
    survival_days: float = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (FUSED_FEATURES,):
            raise ShapeError(
                f"{self.case_id}: expected {FUSED_FEATURES} features, "
                f"got {self.features.shape}"
            )

    def to_dict(self):
        return {
            "case_id": self.case_id,
            "features": self.features.tolist(),
            "age": self.age,
            "survival_days": self.survival_days,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["case_id"], np.asarray(d["features"]), d["age"],
                   d.get("survival_days"))

    def save(self, dir_path):
        path = Path(dir_path) / f"{self.case_id}_features.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class FeatureHead(nn.Module):
    """Two conv layers (512 -> 128 -> 64) applied to bottleneck maps.

    Replicate padding keeps the response to a spatially constant input
    constant, so pooling commutes with constants.
    """

    def __init__(self, in_channels=512, mid_channels=128,
                 out_channels=FEATURES_PER_PLANE):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 3, padding=1,
                               padding_mode="replicate")
        self.conv2 = nn.Conv2d(mid_channels, out_channels, 3, padding=1,
                               padding_mode="replicate")

    def forward(self, x):
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))


def extract_plane_features(case, plane, seg_model, head: FeatureHead,
                           batch_size: int = 8) -> np.ndarray:
    """One 64-vector per case and plane: head conv responses of all slice
    bottlenecks, averaged over slices and spatial positions."""
    if seg_model is None:
        raise MissingModel(f"no segmentation model for plane {plane}")
    slices = slice_plane(case, plane)
    seg_model.eval()
    head.eval()
    total = torch.zeros(FEATURES_PER_PLANE, dtype=torch.float64)
    count = 0
    with torch.no_grad():
        for i in range(0, len(slices), batch_size):
            x = torch.from_numpy(slices[i:i + batch_size]).float()
            feats = head(seg_model.extract_bottleneck(x))   # (n, 64, h, w)
            total += feats.double().sum(dim=(0, 2, 3))
            count += feats.shape[0] * feats.shape[2] * feats.shape[3]
    return (total / count).numpy()


def fuse_features(v_sag, v_cor, v_ax) -> np.ndarray:
    """Concatenate per-plane vectors in (sagittal, coronal, axial) order."""
    vecs = []
    for name, v in zip(PLANES, (v_sag, v_cor, v_ax)):
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.shape != (FEATURES_PER_PLANE,):
            raise ShapeError(f"{name} vector has shape {v.shape}, "
                             f"expected ({FEATURES_PER_PLANE},)")
        vecs.append(v)
    return np.concatenate(vecs)


class SurvivalAnn(nn.Module):
    """Dense trunk 192 -> 64 -> 64 -> 28, age appended, linear scalar out.

    ReLU + dropout on every layer except the last; inference mode is
    deterministic (standard inverted-dropout scaling during training).
    """

    def __init__(self, dropout: float = 0.3):
        super().__init__()
        w = ANN_WIDTHS
        self.fc1 = nn.Linear(w[0], w[1])
        self.fc2 = nn.Linear(w[1], w[2])
        self.fc3 = nn.Linear(w[2], w[3])
        self.out = nn.Linear(w[3] + 1, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, features, age):
        if not torch.isfinite(features).all() or not torch.isfinite(age).all():
            raise InvalidInput("non-finite survival inputs")
        h = self.drop(torch.relu(self.fc1(features)))
        h = self.drop(torch.relu(self.fc2(h)))
        h = self.drop(torch.relu(self.fc3(h)))
        h = torch.cat([h, age.reshape(-1, 1)], dim=1)
        return self.out(h).squeeze(-1)


@dataclass
class Normalization:
    """Train-split z-score statistics for age and the regression target."""

    age_mean: float
    age_std: float
    target_mean: float
    target_std: float

    def to_dict(self):
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SurvivalModel:
    ann: SurvivalAnn
    norm: Normalization
    thresholds: tuple = (300.0, 450.0)

    def predict_days(self, features, age) -> float:
        self.ann.eval()
        f = torch.as_tensor(np.asarray(features, dtype=np.float32)).reshape(1, -1)
        a = torch.tensor([(age - self.norm.age_mean) / self.norm.age_std],
                         dtype=torch.float32)
        with torch.no_grad():
            z = self.ann(f, a).item()
        return z * self.norm.target_std + self.norm.target_mean


def split_samples(samples, cfg: SurvTrainConfig):
    """Deterministic shuffled split; train side takes floor(fraction * n)."""
    order = fork_rng(cfg.seed, (0,)).permutation(len(samples))
    n_train = int(np.floor(cfg.train_fraction * len(samples)))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return ([samples[i] for i in train_idx], [samples[i] for i in test_idx])


def classify_survival(days, thresholds=(300.0, 450.0)) -> str:
    if days < 0:
        raise InvalidInput(f"negative survival days: {days}")
    lo, hi = thresholds
    if days < lo:
        return "short"
    if days <= hi:
        return "mid"
    return "long"


def _average_ranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.arange(1, len(values) + 1)
    # average ranks within tied groups
    for v in np.unique(values):
        mask = values == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def spearman_r(a, b) -> float:
    """Rank correlation with average-rank tie handling."""
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)


def evaluate_survival(preds, targets, thresholds=(300.0, 450.0)) -> dict:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ShapeError(f"preds {preds.shape} vs targets {targets.shape}")
    mse = float(np.mean((preds - targets) ** 2))
    rho = spearman_r(preds, targets)
    classes_p = [classify_survival(max(p, 0.0), thresholds) for p in preds]
    classes_t = [classify_survival(t, thresholds) for t in targets]
    acc = float(np.mean([p == t for p, t in zip(classes_p, classes_t)]))
    return {"mse": mse, "spearman_r": rho, "accuracy": acc}


def train_survival(samples, cfg: SurvTrainConfig = None):
    """Train the dense head on cached features; returns (model, report).

    Only rows with numeric survival targets participate. The report carries
    train/validation MSE (days^2), Spearman rank correlation, and class
    accuracy.
    """
    cfg = cfg or SurvTrainConfig()
    usable = [s for s in samples
              if s.survival_days is not None and s.age is not None]
    if len(usable) < 2:
        raise InsufficientData(f"need >= 2 usable samples, got {len(usable)}")

    train, test = split_samples(usable, cfg)
    ages = np.array([s.age for s in train], dtype=np.float64)
    targets = np.array([s.survival_days for s in train], dtype=np.float64)
    norm = Normalization(
        age_mean=float(ages.mean()),
        age_std=float(ages.std()) or 1.0,
        target_mean=float(targets.mean()),
        target_std=float(targets.std()) or 1.0,
    )

    def tensors(rows):
        f = torch.tensor(np.stack([s.features for s in rows]), dtype=torch.float32)
        a = torch.tensor([(s.age - norm.age_mean) / norm.age_std for s in rows],
                         dtype=torch.float32)
        y = torch.tensor(
            [(s.survival_days - norm.target_mean) / norm.target_std for s in rows],
            dtype=torch.float32)
        return f, a, y

    f_train, a_train, y_train = tensors(train)

    ann = SurvivalAnn(dropout=cfg.dropout)
    init_params(ann, cfg.seed)
    torch.manual_seed(cfg.seed)      # dropout stream
    optimizer = torch.optim.Adam(ann.parameters(), lr=cfg.lr)
    mse = nn.MSELoss()
    n = len(train)
    batch = cfg.batch_size or n
    shuffle_rng = fork_rng(cfg.seed, (1,))

    ann.train()
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for i in range(0, n, batch):
            idx = torch.from_numpy(order[i:i + batch].copy())
            optimizer.zero_grad()
            pred = ann(f_train[idx], a_train[idx])
            loss = mse(pred, y_train[idx])
            loss.backward()
            optimizer.step()

    model = SurvivalModel(ann=ann, norm=norm, thresholds=cfg.class_thresholds)
    report = {"n_train": len(train), "n_test": len(test)}
    for name, rows in (("train", train), ("validation", test)):
        if not rows:
            continue
        preds = [model.predict_days(s.features, s.age) for s in rows]
        days = [s.survival_days for s in rows]
        report[name] = evaluate_survival(preds, days, cfg.class_thresholds)
    return model, report


def save_survival_model(path, model: SurvivalModel, heads=None, seed=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": 1,
        "ann_state": model.ann.state_dict(),
        "normalization": model.norm.to_dict(),
        "thresholds": list(model.thresholds),
        "head_states": {p: h.state_dict() for p, h in (heads or {}).items()},
        "seed": seed,
    }
    torch.save(payload, path)
    return path


def load_survival_model(path, dropout=0.3):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    ann = SurvivalAnn(dropout=dropout)
    ann.load_state_dict(payload["ann_state"])
    ann.eval()
    model = SurvivalModel(
        ann=ann,
        norm=Normalization.from_dict(payload["normalization"]),
        thresholds=tuple(payload["thresholds"]),
    )
    heads = {}
    for plane, state in payload.get("head_states", {}).items():
        mid, in_ch = state["conv1.weight"].shape[:2]
        head = FeatureHead(in_channels=in_ch, mid_channels=mid)
        head.load_state_dict(state)
        head.eval()
        heads[plane] = head
    return model, heads


def make_feature_heads(bottleneck_channels: int, seed: int) -> dict:
    """One deterministic seeded head per plane."""
    heads = {}
    for i, plane in enumerate(PLANES):
        head = FeatureHead(in_channels=bottleneck_channels)
        init_params(head, seed + 1000 * (i + 1))
        head.eval()
        heads[plane] = head
    return heads
