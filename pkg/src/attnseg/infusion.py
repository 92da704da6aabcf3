"""Injection of engineered feature stacks into encoder layers.

At each site the stack is aligned by a convolution with as many filters as
stack channels, added to a 1x1 projection of the layer input, squeezed to a
single sigmoid map by a one-filter 1x1 convolution, and multiplied into the
layer input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConfigError
from .features import ExtractorParams, InputError, canonical_extractors, channel_count

DEFAULT_EXTRACTORS = ("gabor", "sobel", "canny")


@dataclass(frozen=True)
class InjectionPlan:
    sites: tuple[int, ...] = (0, 1)
    extractors: tuple[str, ...] = DEFAULT_EXTRACTORS
    # per-site override of ``extractors``
    site_extractors: Mapping[int, tuple[str, ...]] = field(default_factory=dict)
    # add the aligned stack only, without a projection of the layer input
    stack_only: bool = False
    align_kernel: int = 3
    trace: bool = False
    # optional declared stack width per site, checked against the extractors at build time
    stack_channels: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        sites = tuple(int(s) for s in self.sites)
        if len(set(sites)) != len(sites):
            raise ConfigError(f"duplicate injection sites: {sites}")
        if any(s < 0 for s in sites):
            raise ConfigError("injection sites must be non-negative")
        if self.align_kernel % 2 == 0:
            raise ConfigError("align_kernel must be odd")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "extractors", canonical_extractors(self.extractors))
        object.__setattr__(
            self, "site_extractors",
            {int(k): canonical_extractors(v) for k, v in dict(self.site_extractors).items()},
        )
        object.__setattr__(self, "stack_channels", {int(k): int(v) for k, v in dict(self.stack_channels).items()})

    def extractors_for(self, site: int) -> tuple[str, ...]:
        return self.site_extractors.get(site, self.extractors)

    def all_extractors(self) -> tuple[str, ...]:
        used = set()
        for s in self.sites:
            used.update(self.extractors_for(s))
        return canonical_extractors(used) if used else ()

    def validate(self, depth: int) -> None:
        for s in self.sites:
            if s >= depth:
                raise ConfigError(f"injection site {s} out of range for depth {depth}")

    def to_dict(self) -> dict:
        return {
            "sites": list(self.sites),
            "extractors": list(self.extractors),
            "site_extractors": {str(k): list(v) for k, v in self.site_extractors.items()},
            "stack_only": self.stack_only,
            "align_kernel": self.align_kernel,
            "trace": self.trace,
            "stack_channels": {str(k): v for k, v in self.stack_channels.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "InjectionPlan":
        d = dict(d)
        if "site_extractors" in d:
            d["site_extractors"] = {int(k): tuple(v) for k, v in d["site_extractors"].items()}
        if "stack_channels" in d:
            d["stack_channels"] = {int(k): int(v) for k, v in d["stack_channels"].items()}
        for key in ("sites", "extractors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class SiteAdapter(nn.Module):
    def __init__(self, input_channels: int, stack_channels: int, align_kernel: int = 3,
                 stack_only: bool = False):
        super().__init__()
        self.input_channels = input_channels
        self.stack_channels = stack_channels
        self.align = nn.Conv2d(stack_channels, stack_channels, align_kernel, padding=align_kernel // 2)
        self.input_proj = None if stack_only else nn.Conv2d(input_channels, stack_channels, 1)
        self.squeeze = nn.Conv2d(stack_channels, 1, 1)

    def modulation(self, site_input: torch.Tensor, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[1] != self.stack_channels:
            raise InputError(
                f"feature stack has {stack.shape[1]} channels, adapter expects {self.stack_channels}"
            )
        if stack.shape[2:] != site_input.shape[2:] or stack.shape[0] != site_input.shape[0]:
            raise InputError(
                f"stack shape {tuple(stack.shape)} does not align with input {tuple(site_input.shape)}"
            )
        b = self.align(stack)
        if self.input_proj is not None:
            b = b + self.input_proj(site_input)
        return torch.sigmoid(self.squeeze(b))

    def forward(self, site_input, stack):
        return site_input * self.modulation(site_input, stack)


class InjectionAdapter(nn.Module):
    """Per-site adapters keyed by encoder level; empty when injection is off."""

    def __init__(self, plan: InjectionPlan | None, input_channels: Mapping[int, int],
                 stack_channels: Mapping[int, int]):
        super().__init__()
        self.plan = plan
        self.sites: tuple[int, ...] = plan.sites if plan else ()
        self.adapters = nn.ModuleDict()
        self.traces: dict[int, torch.Tensor] = {}
        for s in self.sites:
            self.adapters[str(s)] = SiteAdapter(
                input_channels[s], stack_channels[s], plan.align_kernel, plan.stack_only
            )

    @property
    def enabled(self) -> bool:
        return bool(self.sites)

    def inject(self, site_input: torch.Tensor, stack: torch.Tensor, site: int) -> torch.Tensor:
        adapter = self.adapters[str(site)]
        if self.plan is not None and self.plan.trace:
            m = adapter.modulation(site_input, stack)
            self.traces[site] = m.detach()
            return site_input * m
        return adapter(site_input, stack)


def build_adapter(plan: InjectionPlan | None, input_channels: Mapping[int, int],
                  stack_channels: Mapping[int, int] | None = None,
                  extractor_params=None) -> InjectionAdapter:
    """Construct adapters, checking declared stack widths against the plan.

    ``stack_channels`` defaults to the width implied by each site's
    extractor list; a declared width that disagrees raises ``ConfigError``.
    """
    if plan is None or not plan.sites:
        return InjectionAdapter(None, {}, {})
    params = extractor_params or ExtractorParams()
    implied = {s: channel_count(plan.extractors_for(s), params) for s in plan.sites}
    if stack_channels is None:
        stack_channels = implied
    for s in plan.sites:
        if s not in stack_channels:
            raise ConfigError(f"no stack width declared for site {s}")
        if stack_channels[s] != implied[s]:
            raise ConfigError(
                f"site {s}: declared {stack_channels[s]} stack channels but extractors "
                f"{plan.extractors_for(s)} produce {implied[s]}"
            )
        if s not in input_channels:
            raise ConfigError(f"site {s} has no known input width")
    return InjectionAdapter(plan, input_channels, stack_channels)


def downsample_stack(stack: torch.Tensor, site: int) -> torch.Tensor:
    """Area-average a full-resolution stack to encoder level ``site``."""
    if site == 0:
        return stack
    f = 2 ** site
    return F.avg_pool2d(stack, kernel_size=f, stride=f)


def inject(site_input: torch.Tensor, stack: torch.Tensor, adapter: InjectionAdapter,
           site: int) -> torch.Tensor:
    return adapter.inject(site_input, stack, site)
