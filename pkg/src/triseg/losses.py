"""Dice loss, multi-class focal loss, and their sum.

Both losses consume per-pixel class probabilities (post-softmax) and
one-hot targets of identical shape (N, C, H, W). Dice sums aggregate over
the whole batch per class (stabilizes rare-class gradients in slabs with
little or no tumor); background is included in the class mean.
"""

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError


@dataclass
class LossConfig:
    epsilon: float = 1e-6
    alpha: object = 1.0      # scalar or per-class sequence
    gamma: float = 2.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        alphas = self.alpha if hasattr(self.alpha, "__len__") else [self.alpha]
        if any(a <= 0 for a in alphas):
            raise ConfigError("alpha weights must be > 0")

    def alpha_vector(self, n_classes, dtype, device):
        if hasattr(self.alpha, "__len__"):
            if len(self.alpha) != n_classes:
                raise ConfigError(
                    f"alpha has {len(self.alpha)} entries for {n_classes} classes"
                )
            return torch.as_tensor(list(self.alpha), dtype=dtype, device=device)
        return torch.full((n_classes,), float(self.alpha), dtype=dtype, device=device)


def _check(probs, target):
    if probs.shape != target.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} != target {tuple(target.shape)}")
    if probs.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W), got {tuple(probs.shape)}")


def dice_loss(probs, target_onehot, cfg: LossConfig = None):
    cfg = cfg or LossConfig()
    _check(probs, target_onehot)
    eps = cfg.epsilon
    dims = (0, 2, 3)
    intersection = (probs * target_onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + target_onehot.sum(dim=dims)
    per_class = (2.0 * intersection + eps) / (denom + eps)
    return 1.0 - per_class.mean()


def focal_loss(probs, target_onehot, cfg: LossConfig = None):
    cfg = cfg or LossConfig()
    _check(probs, target_onehot)
    n_classes = probs.shape[1]
    alpha = cfg.alpha_vector(n_classes, probs.dtype, probs.device).view(1, -1, 1, 1)
    n_voxels = probs.numel() // n_classes
    term = alpha * target_onehot * (1.0 - probs) ** cfg.gamma \
        * torch.log(probs + cfg.epsilon)
    return -term.sum() / n_voxels


def total_loss(probs, target_onehot, cfg: LossConfig = None):
    """Sum of dice and focal losses; also returns the two components."""
    cfg = cfg or LossConfig()
    d = dice_loss(probs, target_onehot, cfg)
    f = focal_loss(probs, target_onehot, cfg)
    return d + f, d, f
