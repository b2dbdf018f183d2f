"""Per-plane segmentation training: slab sampling, Adam updates,
checkpointing with resume, and reproducibility controls.

One "iteration" is one optimizer update on one batch of `batch_slabs`
slabs; the slabs' slices are flattened into a single 2D batch. All
randomness (case choice, slab start, per-slice augmentation) is drawn from
streams forked statelessly per iteration, so a resumed run continues
exactly where the interrupted one stopped.
"""

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_pair, fork_rng
from .data import CaseBundle
from .errors import ConfigError, GeometryMismatch, NumericalDivergence
from .losses import LossConfig, total_loss
from .network import AttentionR2UNet, NetworkConfig, init_params
from .triplanar import CHANNEL_ORDER, PLANE_AXIS, PlanarSlab

CHECKPOINT_FORMAT_VERSION = 1

DEFAULT_ITERATIONS = {"sagittal": 1300, "coronal": 800, "axial": 800}


def default_iterations(plane: str) -> int:
    return DEFAULT_ITERATIONS[plane]


@dataclass
class SegTrainConfig:
    plane: str = "axial"
    lr: float = 1e-5
    batch_slabs: int = 4
    slab_size: int = 8
    iterations: int = None            # None -> per-plane default
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 200
    grad_clip: float = None           # escape hatch, off by default
    single_stream: bool = False       # pin to one thread for bitwise repro

    def __post_init__(self):
        if self.plane not in PLANE_AXIS:
            raise ConfigError(f"unknown plane {self.plane!r}")
        if self.iterations is None:
            self.iterations = default_iterations(self.plane)
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_slabs < 1 or self.slab_size < 1:
            raise ConfigError("batch_slabs and slab_size must be >= 1")


def sample_slab(case: CaseBundle, plane: str, rng: np.random.Generator,
                slab_size: int = 8) -> PlanarSlab:
    """A slab of contiguous slices with its start drawn uniformly."""
    axis = PLANE_AXIS[plane]
    axis_len = case.shape[axis]
    if axis_len < slab_size:
        raise GeometryMismatch(
            f"{case.case_id}: plane axis length {axis_len} < slab {slab_size}"
        )
    start = int(rng.integers(0, axis_len - slab_size + 1))
    window = [slice(None)] * 3
    window[axis] = slice(start, start + slab_size)
    window = tuple(window)
    stack = np.stack([case.volumes[m].voxels[window] for m in CHANNEL_ORDER])
    data = np.ascontiguousarray(np.moveaxis(stack, axis + 1, 0))
    labels = None
    if case.labels is not None:
        labels = np.ascontiguousarray(
            np.moveaxis(case.labels.voxels[window], axis, 0))
    return PlanarSlab(plane=plane, start_index=start, data=data, labels=labels)


def one_hot(labels: np.ndarray, n_classes: int = 4) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) float32 one-hot."""
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:],
                   dtype=np.float32)
    for c in range(n_classes):
        out[:, c] = labels == c
    return out


def assemble_batch(cases, cfg: SegTrainConfig, iteration: int):
    """Sample, augment, and flatten one training batch of slabs.

    Returns float32 tensors: images (B*slab, 3, H, W) and one-hot targets
    (B*slab, 4, H, W).
    """
    rng = fork_rng(cfg.seed, (iteration,))
    images, labels = [], []
    for slot in range(cfg.batch_slabs):
        case = cases[int(rng.integers(0, len(cases)))]
        slab = sample_slab(case, cfg.plane, rng, cfg.slab_size)
        for k in range(cfg.slab_size):
            aug_rng = fork_rng(cfg.seed, (iteration, slot, k))
            img, lab = augment_pair(slab.data[k], slab.labels[k],
                                    cfg.augment, aug_rng)
            images.append(img)
            labels.append(lab)
    x = torch.from_numpy(np.stack(images)).float()
    y = torch.from_numpy(one_hot(np.stack(labels).astype(np.int64))).float()
    return x, y


def train_step(model, optimizer, images, target_onehot, loss_cfg: LossConfig,
               grad_clip=None):
    """One forward/backward/Adam update; returns the loss components."""
    optimizer.zero_grad()
    probs = model(images)
    total, dice, focal = total_loss(probs, target_onehot, loss_cfg)
    if not torch.isfinite(total):
        raise NumericalDivergence(f"non-finite loss: {total.item()!r}")
    total.backward()
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalDivergence("non-finite gradient")
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return {
        "loss": float(total.item()),
        "dice": float(dice.item()),
        "focal": float(focal.item()),
    }


def config_hash(*cfgs) -> str:
    blob = json.dumps([_cfg_dict(c) for c in cfgs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cfg_dict(cfg):
    if hasattr(cfg, "to_dict"):
        return cfg.to_dict()
    if hasattr(cfg, "__dataclass_fields__"):
        return {k: _cfg_dict(getattr(cfg, k)) for k in cfg.__dataclass_fields__}
    if isinstance(cfg, (list, tuple)):
        return [_cfg_dict(v) for v in cfg]
    return cfg


def save_checkpoint(path, model, optimizer, iteration, cfg: SegTrainConfig,
                    net_cfg: NetworkConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "manifest": {
            "plane": cfg.plane,
            "iteration": iteration,
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "network_config": net_cfg.to_dict(),
            "train_config": _cfg_dict(cfg),
            "config_hash": config_hash(cfg, net_cfg),
        },
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version}")
    return payload


def model_from_checkpoint(path):
    payload = load_checkpoint(path)
    net_cfg = NetworkConfig.from_dict(payload["manifest"]["network_config"])
    model = AttentionR2UNet(net_cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload["manifest"]


def train_plane(cases, cfg: SegTrainConfig, out_dir,
                net_cfg: NetworkConfig = None, log_every: int = 1,
                resume: bool = True):
    """Train one planar model; writes checkpoint + CSV loss log.

    Resumes from `<out_dir>/<plane>.pt` when present (and `resume` is set).
    Returns the final checkpoint path.
    """
    if not cases:
        raise ConfigError("empty training dataset")
    if any(c.labels is None for c in cases):
        raise ConfigError("training cases must carry label volumes")
    net_cfg = net_cfg or NetworkConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{cfg.plane}.pt"
    log_path = out_dir / f"{cfg.plane}_log.csv"

    if cfg.single_stream:
        torch.set_num_threads(1)

    model = AttentionR2UNet(net_cfg)
    init_params(model, cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 betas=(0.9, 0.999), eps=1e-8)
    start_iter = 0
    if resume and ckpt_path.exists():
        payload = load_checkpoint(ckpt_path)
        model.load_state_dict(payload["model_state"])
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_iter = payload["manifest"]["iteration"]

    mode = "a" if start_iter > 0 and log_path.exists() else "w"
    with open(log_path, mode, newline="") as logf:
        writer = csv.writer(logf)
        if mode == "w":
            writer.writerow(["iteration", "loss", "dice_component",
                             "focal_component", "wall_time"])
        t0 = time.time()
        for it in range(start_iter, cfg.iterations):
            x, y = assemble_batch(cases, cfg, it)
            stats = train_step(model, optimizer, x, y, cfg.loss, cfg.grad_clip)
            if (it + 1) % log_every == 0:
                writer.writerow([it + 1, f"{stats['loss']:.6f}",
                                 f"{stats['dice']:.6f}",
                                 f"{stats['focal']:.6f}",
                                 f"{time.time() - t0:.3f}"])
            if (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, optimizer, it + 1, cfg, net_cfg)

    save_checkpoint(ckpt_path, model, optimizer, cfg.iterations, cfg, net_cfg)
    return ckpt_path
