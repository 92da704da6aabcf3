"""Encoder-decoder segmentation network, block-placement variants P1-P6 and
the plain U-Net baseline."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Mapping

import torch
import torch.nn as nn

from .blocks import AttentionGate, BlockConfig, ConfigError, DualAttentiveBlock, init_weights
from .features import ExtractorParams, InputError
from .infusion import InjectionPlan, build_adapter, downsample_stack

ARCH_VERSION = 1

# Trainable-parameter count reported for the full model with feature infusion.
REFERENCE_PARAMS = 1_456_961


class ShapeError(ValueError):
    pass


class Variant(str, enum.Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    P5 = "P5"
    P6 = "P6"
    UNET_BASELINE = "UNET_BASELINE"


@dataclass(frozen=True)
class Placement:
    encoder_dab: bool
    decoder_dab: bool
    skip_dab: bool
    gates: bool


PLACEMENTS = {
    Variant.P1: Placement(encoder_dab=False, decoder_dab=False, skip_dab=True, gates=False),
    Variant.P2: Placement(encoder_dab=False, decoder_dab=True, skip_dab=False, gates=False),
    Variant.P3: Placement(encoder_dab=False, decoder_dab=True, skip_dab=False, gates=True),
    Variant.P4: Placement(encoder_dab=True, decoder_dab=False, skip_dab=False, gates=True),
    Variant.P5: Placement(encoder_dab=True, decoder_dab=True, skip_dab=False, gates=False),
    Variant.P6: Placement(encoder_dab=True, decoder_dab=True, skip_dab=False, gates=True),
    Variant.UNET_BASELINE: Placement(encoder_dab=False, decoder_dab=False, skip_dab=False, gates=False),
}

ABLATION_VARIANTS = (Variant.P1, Variant.P2, Variant.P3, Variant.P4, Variant.P5, Variant.P6)


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 10
    depth: int = 4
    base_filters: int = 22
    variant: Variant = Variant.P6
    dropout_rate: float = 0.2
    input_channels: int = 3
    injection_plan: InjectionPlan | None = None
    kernel_sizes: tuple[int, ...] = (3, 5)
    pointwise_fraction: Fraction = Fraction(1, 2)
    se_ratio_pair: tuple[int, int] = (4, 16)
    # False selects the original fixed-ratio attention (v1)
    learnable_ratio: bool = True
    batch_norm: bool = True
    extractor_params: ExtractorParams = field(default_factory=ExtractorParams)

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        if self.num_classes < 1 or self.depth < 1 or self.base_filters < 1 or self.input_channels < 1:
            raise ConfigError("num_classes, depth, base_filters and input_channels must be positive")
        if self.depth > 12:
            raise ConfigError("depth too large")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        object.__setattr__(self, "se_ratio_pair", tuple(self.se_ratio_pair))
        object.__setattr__(self, "pointwise_fraction", Fraction(self.pointwise_fraction))
        if self.injection_plan is not None:
            self.injection_plan.validate(self.depth)

    @property
    def placement(self) -> Placement:
        return PLACEMENTS[self.variant]

    def widths(self) -> list[int]:
        """Channel width per encoder level, bottleneck last."""
        return [self.base_filters * 2 ** i for i in range(self.depth + 1)]

    def block_config(self, cin: int, cout: int) -> BlockConfig:
        return BlockConfig(cin, cout, self.kernel_sizes, self.pointwise_fraction,
                           self.se_ratio_pair, self.learnable_ratio, self.batch_norm)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "depth": self.depth,
            "base_filters": self.base_filters,
            "variant": self.variant.value,
            "dropout_rate": self.dropout_rate,
            "input_channels": self.input_channels,
            "injection_plan": self.injection_plan.to_dict() if self.injection_plan else None,
            "kernel_sizes": list(self.kernel_sizes),
            "pointwise_fraction": str(self.pointwise_fraction),
            "se_ratio_pair": list(self.se_ratio_pair),
            "learnable_ratio": self.learnable_ratio,
            "batch_norm": self.batch_norm,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        if d.get("injection_plan") is not None:
            plan = d["injection_plan"]
            d["injection_plan"] = plan if isinstance(plan, InjectionPlan) else InjectionPlan.from_dict(plan)
        if "pointwise_fraction" in d:
            d["pointwise_fraction"] = Fraction(str(d["pointwise_fraction"]))
        d.pop("extractor_params", None)
        return cls(**d)


class DoubleConv(nn.Module):
    """Classic U-Net level: two 3x3 convolutions, each followed by ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


class SegmentationModel(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        pl = config.placement
        w = config.widths()
        d = config.depth

        def level_block(cin, cout, dab):
            return DualAttentiveBlock(config.block_config(cin, cout)) if dab else DoubleConv(cin, cout)

        enc_in = [config.input_channels] + w[:d - 1]
        self.encoders = nn.ModuleList(level_block(enc_in[i], w[i], pl.encoder_dab) for i in range(d))
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = level_block(w[d - 1], w[d], pl.encoder_dab)
        self.upconvs = nn.ModuleList(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in range(d))
        self.decoders = nn.ModuleList(level_block(2 * w[i], w[i], pl.decoder_dab) for i in range(d))
        self.gates = (
            nn.ModuleList(AttentionGate(w[i], w[i + 1], max(1, w[i] // 2)) for i in range(d))
            if pl.gates else None
        )
        self.skip_blocks = (
            nn.ModuleList(DualAttentiveBlock(config.block_config(w[i], w[i])) for i in range(d))
            if pl.skip_dab else None
        )
        self.dropout = nn.Dropout(config.dropout_rate) if config.dropout_rate > 0 else nn.Identity()
        self.head = nn.Conv2d(w[0], config.num_classes, 1)

        plan = config.injection_plan
        self.injection = build_adapter(
            plan, {i: enc_in[i] for i in range(d)}, plan.stack_channels or None, config.extractor_params
        ) if plan is not None and plan.sites else None
        init_weights(self)

    @property
    def injects(self) -> bool:
        return self.injection is not None

    def _check_input(self, x, features):
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected (N, {self.config.input_channels}, H, W) input, got {tuple(x.shape)}"
            )
        f = 2 ** self.config.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by {f}")
        if self.injects and features is None:
            raise InputError("this model injects engineered features; pass `features`")
        if not self.injects and features is not None:
            raise InputError("features given but the model has no injection plan")

    def _site_stack(self, features, site):
        stack = features[site] if isinstance(features, Mapping) else features
        return downsample_stack(stack, site)

    def logits(self, x: torch.Tensor, features=None) -> torch.Tensor:
        self._check_input(x, features)
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            if i > 0:
                h = self.pool(h)
            if self.injects and i in self.injection.sites:
                h = self.injection.inject(h, self._site_stack(features, i), i)
            h = enc(h)
            skips.append(h)
        h = self.bottleneck(self.pool(h))
        for i in reversed(range(self.config.depth)):
            skip = skips[i]
            if self.gates is not None:
                skip = self.gates[i](skip, h)
            if self.skip_blocks is not None:
                skip = self.skip_blocks[i](skip)
            h = self.decoders[i](torch.cat([skip, self.upconvs[i](h)], dim=1))
        return self.head(self.dropout(h))

    def forward(self, x: torch.Tensor, features=None) -> torch.Tensor:
        """Per-pixel class probabilities, shape (N, num_classes, H, W)."""
        return torch.softmax(self.logits(x, features), dim=1)


def build_model(cfg: NetworkConfig) -> SegmentationModel:
    return SegmentationModel(cfg)


def forward(model: SegmentationModel, x: torch.Tensor, features=None) -> torch.Tensor:
    return model(x, features)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameters_by_module(model: SegmentationModel) -> dict[str, int]:
    """Trainable parameter counts per top-level submodule."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        if p.requires_grad:
            top = name.split(".")[0]
            out[top] = out.get(top, 0) + p.numel()
    return out


def parameter_groups(model: SegmentationModel) -> set[str]:
    """Which architectural components carry parameters, found by name scan."""
    groups = set()
    for name, _ in model.named_parameters():
        parts = name.split(".")
        attn = ".scse." in name or ".multiscale." in name
        if parts[0] == "encoders" and attn:
            groups.add("encoder_dab")
        elif parts[0] == "bottleneck" and attn:
            groups.add("bottleneck_dab")
        elif parts[0] == "decoders" and attn:
            groups.add("decoder_dab")
        elif parts[0] == "skip_blocks":
            groups.add("skip_dab")
        elif parts[0] == "gates":
            groups.add("gates")
        elif parts[0] == "injection":
            groups.add("injection")
        if ".scse." in name:
            groups.add("scse")
    return groups


def build_ablation_suite(base: NetworkConfig) -> list[SegmentationModel]:
    return [build_model(replace(base, variant=v)) for v in ABLATION_VARIANTS]
