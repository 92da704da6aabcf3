"""Neural building blocks: multiscale depthwise-separable convolution,
squeeze-and-excitation units with a blended reduction ratio, the dual
attentive block and the additive attention gate.

All modules take and return NCHW tensors.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised for invalid architecture or pipeline configuration."""


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    kernel_sizes: tuple[int, ...] = (3, 5)
    pointwise_fraction: Fraction = Fraction(1, 2)
    se_ratio_pair: tuple[int, int] = (4, 16)
    # v1 attention: single fixed ratio (se_ratio_pair[1]) and no blend scalar
    learnable_ratio: bool = True
    batch_norm: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not self.kernel_sizes:
            raise ConfigError("kernel_sizes must not be empty")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel size {k} must be odd and positive")
        frac = Fraction(self.pointwise_fraction)
        if not 0 < frac <= 1:
            raise ConfigError("pointwise_fraction must lie in (0, 1]")
        if (frac * self.out_channels).denominator != 1:
            raise ConfigError(
                f"out_channels={self.out_channels} does not split evenly by "
                f"pointwise_fraction={frac}"
            )
        object.__setattr__(self, "pointwise_fraction", frac)
        check_ratio_pair(self.out_channels, self.se_ratio_pair)

    @property
    def pointwise_channels(self) -> int:
        return int(self.pointwise_fraction * self.out_channels)


def check_ratio_pair(channels: int, ratio_pair: Sequence[int]) -> None:
    r_low, r_high = ratio_pair
    if r_low < 1 or r_high < 1:
        raise ConfigError("reduction ratios must be positive")
    if r_low >= r_high:
        raise ConfigError(f"need r_low < r_high, got {tuple(ratio_pair)}")
    if channels // r_high < 1:
        raise ConfigError(
            f"{channels} channels cannot be reduced by ratio {r_high}"
        )


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm2d(channels) if enabled else nn.Identity()


def _check_channels(x: torch.Tensor, expected: int) -> None:
    if x.dim() != 4:
        raise ConfigError(f"expected a rank-4 tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigError(f"expected {expected} channels, got {x.shape[1]}")


class SeparableConv(nn.Module):
    """Depthwise k x k convolution followed by a pointwise 1 x 1 mix."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, kernel_size,
            padding=kernel_size // 2, groups=in_channels,
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class MultiscaleDWSBlock(nn.Module):
    """Parallel separable branches (one per kernel size) plus a reduced 1x1
    branch, concatenated and projected back to ``out_channels``."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        out = cfg.out_channels
        self.branches = nn.ModuleList(
            nn.Sequential(
                SeparableConv(cfg.in_channels, out, k),
                _norm(out, cfg.batch_norm),
                nn.ReLU(),
            )
            for k in cfg.kernel_sizes
        )
        pw = cfg.pointwise_channels
        self.branches.append(
            nn.Sequential(
                nn.Conv2d(cfg.in_channels, pw, 1),
                _norm(pw, cfg.batch_norm),
                nn.ReLU(),
            )
        )
        concat = out * len(cfg.kernel_sizes) + pw
        self.project = nn.Sequential(
            nn.Conv2d(concat, out, 1),
            _norm(out, cfg.batch_norm),
            nn.ReLU(),
        )

    def forward(self, x):
        _check_channels(x, self.cfg.in_channels)
        return self.project(torch.cat([b(x) for b in self.branches], dim=1))


class _RatioBlend(nn.Module):
    """Blend of gates from excitation paths with different reduction ratios.

    With two paths the result is ``sigmoid(alpha) * g_low + (1 - sigmoid(alpha)) * g_high``.
    ``alpha`` starts at zero (equal weighting). A single path is used as is.
    """

    def __init__(self, paths: list[nn.Module]):
        super().__init__()
        self.paths = nn.ModuleList(paths)
        if len(paths) == 2:
            self.alpha = nn.Parameter(torch.zeros(()))
        else:
            self.register_parameter("alpha", None)

    def forward(self, z):
        gates = [p(z) for p in self.paths]
        if self.alpha is None:
            return gates[0]
        w = torch.sigmoid(self.alpha)
        return w * gates[0] + (1 - w) * gates[1]


class ChannelSE(nn.Module):
    """Channel squeeze-and-excitation: global average pool, bottleneck MLP,
    per-channel sigmoid gate."""

    def __init__(self, channels: int, ratio_pair=(4, 16), learnable_ratio: bool = True):
        super().__init__()
        check_ratio_pair(channels, ratio_pair)
        self.channels = channels
        ratios = ratio_pair if learnable_ratio else (ratio_pair[1],)
        self.excite = _RatioBlend([
            nn.Sequential(
                nn.Linear(channels, channels // r),
                nn.ReLU(),
                nn.Linear(channels // r, channels),
                nn.Sigmoid(),
            )
            for r in ratios
        ])

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel gates, shape (N, C)."""
        _check_channels(x, self.channels)
        return self.excite(x.mean(dim=(2, 3)))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


class SpatialSE(nn.Module):
    """Spatial squeeze-and-excitation: per-pixel 1x1 bottleneck to a single
    sigmoid map shared across channels."""

    def __init__(self, channels: int, ratio_pair=(4, 16), learnable_ratio: bool = True):
        super().__init__()
        check_ratio_pair(channels, ratio_pair)
        self.channels = channels
        ratios = ratio_pair if learnable_ratio else (ratio_pair[1],)
        self.excite = _RatioBlend([
            nn.Sequential(
                nn.Conv2d(channels, channels // r, 1),
                nn.ReLU(),
                nn.Conv2d(channels // r, 1, 1),
                nn.Sigmoid(),
            )
            for r in ratios
        ])

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """Spatial map, shape (N, 1, H, W)."""
        _check_channels(x, self.channels)
        return self.excite(x)

    def forward(self, x):
        return x * self.attention_map(x)


class ConcurrentSCSE(nn.Module):
    def __init__(self, channels: int, ratio_pair=(4, 16), learnable_ratio: bool = True):
        super().__init__()
        self.cse = ChannelSE(channels, ratio_pair, learnable_ratio)
        self.sse = SpatialSE(channels, ratio_pair, learnable_ratio)

    def forward(self, x):
        return self.cse(x) + self.sse(x)


class DualAttentiveBlock(nn.Module):
    """Multiscale separable block whose output is recalibrated by concurrent
    scSE attention and fused back by addition: ``m + scse(m)``."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.multiscale = MultiscaleDWSBlock(cfg)
        self.scse = ConcurrentSCSE(cfg.out_channels, cfg.se_ratio_pair, cfg.learnable_ratio)

    def forward(self, x):
        m = self.multiscale(x)
        return m + self.scse(m)


class AttentionGate(nn.Module):
    """Additive attention gate on a skip connection.

    ``gating`` comes from the coarser decoder level (half the skip resolution);
    it is bilinearly upsampled to the skip grid before the additive step.
    """

    def __init__(self, skip_channels: int, gating_channels: int, inter_channels: int):
        super().__init__()
        self.skip_channels = skip_channels
        self.gating_channels = gating_channels
        self.theta_skip = nn.Conv2d(skip_channels, inter_channels, 1, bias=False)
        self.phi_gating = nn.Conv2d(gating_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def coefficients(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        """Attention coefficients at skip resolution, shape (N, 1, H, W)."""
        _check_channels(skip, self.skip_channels)
        _check_channels(gating, self.gating_channels)
        hs, ws = skip.shape[2:]
        hg, wg = gating.shape[2:]
        if (hs, ws) != (2 * hg, 2 * wg):
            raise ConfigError(
                f"gating resolution {(hg, wg)} must be half of skip resolution {(hs, ws)}"
            )
        g = F.interpolate(self.phi_gating(gating), size=(hs, ws), mode="bilinear", align_corners=False)
        a = torch.sigmoid(self.psi(F.relu(self.theta_skip(skip) + g)))
        if a.shape[2:] != skip.shape[2:]:
            a = F.interpolate(a, size=(hs, ws), mode="bilinear", align_corners=False)
        return a

    def forward(self, skip, gating):
        return skip * self.coefficients(skip, gating)


def init_weights(module: nn.Module) -> None:
    """He-uniform weights and zero biases for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
