"""Attention-gated recurrent-residual U-Net for 2D multi-channel slices.

Structure: four encoder levels of recurrent-residual conv blocks (filters
64->512 by default) joined by 2x2 max-pooling, a mirrored decoder using
transposed-conv upsampling, attention-gated skip connections, and a 1x1
conv + per-pixel softmax head over 4 classes. Instance normalization is
used throughout (batch sizes are small). Odd spatial dims are supported:
pooling floors, and both attention coefficients and upsampled decoder maps
are bilinearly resampled to the exact skip dims.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

MIN_SPATIAL = 16


@dataclass
class NetworkConfig:
    in_channels: int = 3               # T1ce, T2, FLAIR
    n_classes: int = 4
    level_filters: tuple = (64, 128, 256, 512)
    t_steps: int = 2

    def __post_init__(self):
        self.level_filters = tuple(int(f) for f in self.level_filters)
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if any(a >= b for a, b in zip(self.level_filters, self.level_filters[1:])):
            raise ConfigError("level_filters must be strictly increasing")
        if self.t_steps < 0:
            raise ConfigError("t_steps must be >= 0")

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "level_filters": list(self.level_filters),
            "t_steps": self.t_steps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "level_filters": tuple(d["level_filters"])})


def instance_norm(x, eps=1e-5):
    """Per (sample, channel) spatial standardization."""
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps)


class RecurrentConvUnit(nn.Module):
    """One recurrent conv layer: the feedforward response of the input is
    refined t_steps times through a recurrent kernel, with instance norm and
    ReLU after every step. t_steps=0 degenerates to a plain conv layer.

    The norm carries a per-channel learnable affine (shared across steps,
    like the recurrent kernel); without it the normalization would cancel
    the conv bias and freeze activation scales."""

    def __init__(self, in_channels, out_channels, t_steps=2, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.t_steps = t_steps
        self.feed = nn.Conv2d(in_channels, out_channels, kernel_size,
                              padding=pad, bias=True)
        self.recur = nn.Conv2d(out_channels, out_channels, kernel_size,
                               padding=pad, bias=False)
        self.norm = nn.InstanceNorm2d(out_channels, eps=1e-5, affine=True)

    def forward(self, u):
        if u.shape[1] != self.feed.in_channels:
            raise ShapeError(
                f"expected {self.feed.in_channels} input channels, got {u.shape[1]}"
            )
        drive = self.feed(u)
        x = F.relu(self.norm(drive))
        for _ in range(self.t_steps):
            x = F.relu(self.norm(drive + self.recur(x)))
        return x


class RecurrentResidualBlock(nn.Module):
    """Two stacked recurrent conv units wrapped in a residual shortcut.

    The shortcut is the identity when channel counts match, otherwise a 1x1
    projection of the input.
    """

    def __init__(self, in_channels, out_channels, t_steps=2):
        super().__init__()
        self.project = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels else None
        )
        self.unit1 = RecurrentConvUnit(out_channels, out_channels, t_steps)
        self.unit2 = RecurrentConvUnit(out_channels, out_channels, t_steps)
        self.in_channels = in_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        shortcut = self.project(x) if self.project is not None else x
        return self.unit2(self.unit1(shortcut)) + shortcut


class AttentionGate(nn.Module):
    """Per-pixel multiplicative gating of skip features by a deeper signal.

    The attention map is computed at the gating signal's (coarser)
    resolution and bilinearly resampled to the skip's exact spatial dims, so
    arbitrary (odd) sizes are handled.
    """

    def __init__(self, skip_channels, gate_channels, inter_channels=None):
        super().__init__()
        inter = inter_channels or max(skip_channels // 2, 1)
        self.w_x = nn.Conv2d(skip_channels, inter, 1, bias=True)
        self.w_g = nn.Conv2d(gate_channels, inter, 1, bias=True)
        self.psi = nn.Conv2d(inter, 1, 1, bias=True)

    def forward(self, skip, gate):
        if skip.shape[1] != self.w_x.in_channels or gate.shape[1] != self.w_g.in_channels:
            raise ShapeError("attention gate channel mismatch")
        coarse = gate.shape[-2:]
        skip_c = skip
        if skip.shape[-2:] != coarse:
            skip_c = F.interpolate(skip, size=coarse, mode="bilinear",
                                   align_corners=False)
        alpha = torch.sigmoid(self.psi(F.relu(self.w_x(skip_c) + self.w_g(gate))))
        if alpha.shape[-2:] != skip.shape[-2:]:
            alpha = F.interpolate(alpha, size=skip.shape[-2:], mode="bilinear",
                                  align_corners=False)
        return skip * alpha


def _match(x, size):
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class AttentionR2UNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        f = self.cfg.level_filters
        t = self.cfg.t_steps

        self.enc1 = RecurrentResidualBlock(self.cfg.in_channels, f[0], t)
        self.enc2 = RecurrentResidualBlock(f[0], f[1], t)
        self.enc3 = RecurrentResidualBlock(f[1], f[2], t)
        self.enc4 = RecurrentResidualBlock(f[2], f[3], t)  # bottleneck
        self.pool = nn.MaxPool2d(2)

        self.up3 = nn.ConvTranspose2d(f[3], f[2], 2, stride=2)
        self.gate3 = AttentionGate(f[2], f[3])
        self.dec3 = RecurrentResidualBlock(2 * f[2], f[2], t)

        self.up2 = nn.ConvTranspose2d(f[2], f[1], 2, stride=2)
        self.gate2 = AttentionGate(f[1], f[2])
        self.dec2 = RecurrentResidualBlock(2 * f[1], f[1], t)

        self.up1 = nn.ConvTranspose2d(f[1], f[0], 2, stride=2)
        self.gate1 = AttentionGate(f[0], f[1])
        self.dec1 = RecurrentResidualBlock(2 * f[0], f[0], t)

        self.head = nn.Conv2d(f[0], self.cfg.n_classes, 1)

    def _check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected (N,C,H,W), got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        h, w = x.shape[-2:]
        if h < MIN_SPATIAL or w < MIN_SPATIAL:
            raise ShapeError(f"spatial dims ({h},{w}) below minimum {MIN_SPATIAL}")

    def _encode(self, x):
        s1 = self.enc1(x)
        s2 = self.enc2(self.pool(s1))
        s3 = self.enc3(self.pool(s2))
        bottleneck = self.enc4(self.pool(s3))
        return s1, s2, s3, bottleneck

    def _decode(self, s1, s2, s3, bottleneck):
        d3 = self.dec3(torch.cat(
            [self.gate3(s3, bottleneck), _match(self.up3(bottleneck), s3.shape[-2:])],
            dim=1))
        d2 = self.dec2(torch.cat(
            [self.gate2(s2, d3), _match(self.up2(d3), s2.shape[-2:])], dim=1))
        d1 = self.dec1(torch.cat(
            [self.gate1(s1, d2), _match(self.up1(d2), s1.shape[-2:])], dim=1))
        return self.head(d1)

    def forward_logits(self, x):
        self._check_input(x)
        return self._decode(*self._encode(x))

    def forward(self, x):
        """Per-pixel class probabilities, shape (N, n_classes, H, W)."""
        return F.softmax(self.forward_logits(x), dim=1)

    def extract_bottleneck(self, x):
        """Deepest encoder activation, identical to the one used internally."""
        self._check_input(x)
        return self._encode(x)[3]


def init_params(model: nn.Module, seed: int):
    """Seeded fan-in-scaled init, independent of global RNG state.

    A classification head starts with zero bias (neutral class priors);
    the remaining weights follow torch's fan-in-scaled uniform scheme.
    """
    g = torch.Generator().manual_seed(int(seed))
    head = getattr(model, "head", None)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=5 ** 0.5, generator=g)
            if m.bias is not None:
                fan_in = nn.init._calculate_fan_in_and_fan_out(m.weight)[0]
                bound = 1.0 / fan_in ** 0.5 if fan_in > 0 else 0.0
                nn.init.uniform_(m.bias, -bound, bound, generator=g)
    if head is not None:
        # neutral start: exactly uniform class probabilities everywhere
        nn.init.zeros_(head.weight)
        if head.bias is not None:
            nn.init.zeros_(head.bias)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
