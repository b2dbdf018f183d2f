"""Run configuration: one YAML document drives every command.

CLI flags override individual keys; the effective config is echoed into
each command's output directory as config_used.yaml.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .network import NetworkConfig
from .preprocess import PreprocessConfig
from .survival import SurvTrainConfig
from .training import SegTrainConfig
from .triplanar import PLANES


@dataclass
class RunConfig:
    data_root: str = "data"
    out_root: str = "runs/default"
    seed: int = 0
    fusion: str = "probs"                 # probs | logits
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train_seg: dict = None                # plane -> SegTrainConfig
    survival: SurvTrainConfig = field(default_factory=SurvTrainConfig)

    def __post_init__(self):
        if self.fusion not in ("probs", "logits"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.train_seg is None:
            self.train_seg = {}
        for plane in PLANES:
            if plane not in self.train_seg:
                self.train_seg[plane] = SegTrainConfig(
                    plane=plane, seed=self.seed,
                    loss=self.loss, augment=self.augment,
                )

    # --- serialization ---------------------------------------------------

    def to_dict(self):
        def plain(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {k: plain(getattr(obj, k))
                        for k in obj.__dataclass_fields__}
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            return obj
        return plain(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        kwargs = {}
        for key in ("data_root", "out_root", "seed", "fusion"):
            if key in d:
                kwargs[key] = d[key]
        if "preprocess" in d:
            kwargs["preprocess"] = PreprocessConfig(**_tupled(d["preprocess"]))
        if "augment" in d:
            kwargs["augment"] = AugmentConfig(**_tupled(d["augment"]))
        if "network" in d:
            kwargs["network"] = NetworkConfig(**_tupled(d["network"]))
        if "loss" in d:
            kwargs["loss"] = LossConfig(**d["loss"])
        if "survival" in d:
            kwargs["survival"] = SurvTrainConfig(**_tupled(d["survival"]))
        cfg = cls(**kwargs)
        for plane, sub in (d.get("train_seg") or {}).items():
            sub = dict(sub)
            sub.setdefault("plane", plane)
            if "loss" in sub and isinstance(sub["loss"], dict):
                sub["loss"] = LossConfig(**sub["loss"])
            else:
                sub["loss"] = cfg.loss
            if "augment" in sub and isinstance(sub["augment"], dict):
                sub["augment"] = AugmentConfig(**_tupled(sub["augment"]))
            else:
                sub["augment"] = cfg.augment
            cfg.train_seg[plane] = SegTrainConfig(**sub)
        return cfg

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


_TUPLE_KEYS = {"crop_shape", "level_filters", "blur_sigma_range",
               "class_thresholds"}


def _tupled(d):
    return {k: tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v
            for k, v in d.items()}
