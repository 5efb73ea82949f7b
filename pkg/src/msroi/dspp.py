"""Deep spatial pyramid pooling over several backbone stages.

Each tapped stage gets one 3x3 atrous branch whose rate grows with the
square root of the tap's pixel count relative to the smallest tap:

    rate_i = alpha * sqrt(H_i * W_i / (H_min * W_min))

so ``stride_i * rate_i`` is the same for every level of a halving pyramid.
Branch outputs are resized to the smallest tap, concatenated and fused by a
1x1 convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class StageTap:
    stage_index: int
    channels: int
    height: int
    width: int
    stride: int

    def __post_init__(self):
        if not 1 <= self.stage_index <= 6:
            raise ValueError(f"stage_index must be in 1..6, got {self.stage_index}")
        if min(self.channels, self.height, self.width, self.stride) < 1:
            raise ValueError(f"tap fields must be positive: {self}")
        if self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")


@dataclass(frozen=True)
class RateEntry:
    stage_index: int
    unrounded_rate: float
    rate: int


@dataclass(frozen=True)
class RateSchedule:
    alpha: int
    entries: tuple[RateEntry, ...]
    min_resolution: tuple[int, int]

    @property
    def rates(self) -> list[int]:
        return [e.rate for e in self.entries]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compute_rates(taps, alpha: int = 3) -> RateSchedule:
    """Resolution-proportional atrous rates for ``taps`` (see module docstring).

    >>> taps = [StageTap(4, 8, 56, 56, 4), StageTap(5, 8, 28, 28, 8), StageTap(6, 8, 14, 14, 16)]
    >>> compute_rates(taps, 3).rates
    [12, 6, 3]
    """
    taps = list(taps)
    if not taps:
        raise ValueError("compute_rates needs at least one tap")
    if alpha < 1:
        raise ValueError(f"alpha must be a positive integer, got {alpha}")
    smallest = min(taps, key=lambda t: t.height * t.width)
    base = smallest.height * smallest.width
    entries = []
    for t in taps:
        area = t.height * t.width
        # the minimum tap gets exactly alpha, not alpha * sqrt(1.0)
        unrounded = float(alpha) if area == base else alpha * math.sqrt(area / base)
        entries.append(RateEntry(t.stage_index, unrounded, max(1, round_half_up(unrounded))))
    return RateSchedule(alpha, tuple(entries), (smallest.height, smallest.width))


def receptive_span(tap: StageTap, rate: int, kernel: int = 3) -> int:
    """Input-pixel extent of one dilated kernel application at ``tap``."""
    if kernel % 2 == 0:
        raise ValueError("kernel must be odd")
    if rate < 1:
        raise ValueError("rate must be >= 1")
    return tap.stride * ((kernel - 1) * rate + 1)


@dataclass
class DsppParams:
    branch_weights: list[Tensor]
    branch_biases: list[Tensor]
    fusion_weight: Tensor
    fusion_bias: Tensor

    @property
    def out_channels(self) -> int:
        return self.fusion_weight.shape[0]


def init_dspp_params(taps, out_channels: int, rng: np.random.Generator) -> DsppParams:
    ws, bs = [], []
    for t in taps:
        ws.append(Tensor(ops.fan_in_uniform(rng, (out_channels, t.channels, 3, 3)), trainable=True))
        bs.append(Tensor(np.zeros(out_channels), trainable=True))
    fw = Tensor(ops.fan_in_uniform(rng, (out_channels, out_channels * len(taps), 1, 1)), trainable=True)
    fb = Tensor(np.zeros(out_channels), trainable=True)
    return DsppParams(ws, bs, fw, fb)


def dspp_forward(features, schedule: RateSchedule, params: DsppParams, taps=None) -> Tensor:
    features = list(features)
    if len(features) != len(schedule.entries) or len(features) != len(params.branch_weights):
        raise ShapeError(
            f"dspp: {len(features)} features, {len(schedule.entries)} schedule entries, "
            f"{len(params.branch_weights)} branches")
    if taps is not None:
        for f, t in zip(features, taps):
            if f.shape[1:] != (t.channels, t.height, t.width):
                raise ShapeError(f"dspp: feature {list(f.shape)} does not match tap {t}")
    p = params.out_channels
    target = schedule.min_resolution
    branches = []
    for f, entry, w, b in zip(features, schedule.entries, params.branch_weights, params.branch_biases):
        spec = ops.Conv2dSpec.same(f.shape[1], p, 3, entry.rate)
        y = ops.relu(ops.conv2d(f, w, b, spec))
        branches.append(ops.resize_bilinear(y, target))
    merged = ops.concat_channels(branches)
    fusion = ops.Conv2dSpec(merged.shape[1], p, (1, 1))
    return ops.relu(ops.conv2d(merged, params.fusion_weight, params.fusion_bias, fusion))
