"""Spatial attention gate (CID block).

Two 1x1 convolutions squeeze C channels to ceil(C/4) and then to a single
map; a sigmoid turns it into a gate in (0, 1) that multiplies every channel
at the same pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, make_op


def reduced_channels(c: int) -> int:
    return max(1, math.ceil(c / 4))


@dataclass
class CidParams:
    reduce_weight: Tensor   # [ceil(C/4), C, 1, 1]
    reduce_bias: Tensor
    project_weight: Tensor  # [1, ceil(C/4), 1, 1]
    project_bias: Tensor

    @property
    def in_channels(self) -> int:
        return self.reduce_weight.shape[1]


def init_cid_params(channels: int, rng: np.random.Generator) -> CidParams:
    r = reduced_channels(channels)
    return CidParams(
        Tensor(ops.fan_in_uniform(rng, (r, channels, 1, 1)), trainable=True),
        Tensor(np.zeros(r), trainable=True),
        Tensor(ops.fan_in_uniform(rng, (1, r, 1, 1)), trainable=True),
        Tensor(np.zeros(1), trainable=True),
    )


def attention_factor(input_channels: int, output_channels: int) -> float:
    if input_channels <= 0 or output_channels <= 0:
        raise ValueError("channel counts must be positive")
    return input_channels / output_channels


def attention_map(x: Tensor, params: CidParams) -> Tensor:
    """The [N,1,H,W] gate, values in (0, 1)."""
    if x.data.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"cid: input {list(x.shape)} does not match {params.in_channels} channels")
    c = x.shape[1]
    r = reduced_channels(c)
    h = ops.relu(ops.conv2d(x, params.reduce_weight, params.reduce_bias, ops.Conv2dSpec(c, r, (1, 1))))
    z = ops.conv2d(h, params.project_weight, params.project_bias, ops.Conv2dSpec(r, 1, (1, 1)))
    return ops.sigmoid(z)


def gate_channels(x: Tensor, gate: Tensor) -> Tensor:
    """x * gate with the single gate channel broadcast over all of x's channels."""
    if gate.data.ndim != 4 or gate.shape[1] != 1 or gate.shape[0] != x.shape[0] or gate.shape[2:] != x.shape[2:]:
        raise ShapeError(f"gate {list(gate.shape)} cannot broadcast over {list(x.shape)}")
    xd, gd = x.data, gate.data
    return make_op("gate_channels", xd * gd, (x, gate),
                   lambda g: (g * gd, (g * xd).sum(axis=1, keepdims=True)))


def cid_forward(x: Tensor, params: CidParams) -> Tensor:
    return gate_channels(x, attention_map(x, params))
