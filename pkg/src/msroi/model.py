"""Six-stage CNN with optional CID gate and D-SPP side path.

Layout (input 64x64 gives stage sizes 64, 32, 16, 8, 4, 2)::

    stage s: conv3x3 (stride 2 for s > 1) -> ReLU -> conv3x3 -> ReLU
    CID gate after stage 1 when enabled
    D-SPP over the outputs of the selected stages
    head: dense(concat(GAP(stage 6), GAP(D-SPP)))

There is no batch normalisation, so samples never interact inside a batch.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import cid, dspp, ops
from .tensor import NonFiniteError, ShapeError, Tensor

NUM_STAGES = 6


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int, int] = (64, 64, 1)  # H, W, C
    stage_channels: tuple[int, ...] = (16, 32, 64, 96, 128, 160)
    classes: int = 2
    alpha: int = 3
    dspp_channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"need {NUM_STAGES} stage channel counts, got {len(self.stage_channels)}")
        if min(self.stage_channels) < 4:
            raise ValueError("every stage needs at least 4 channels")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ValueError(f"bad input_size {self.input_size}")
        if self.classes < 2 or self.alpha < 1 or self.dspp_channels < 1:
            raise ValueError("classes >= 2, alpha >= 1 and dspp_channels >= 1 required")

    def stage_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_size[:2]
        sizes = [(h, w)]
        for _ in range(NUM_STAGES - 1):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            sizes.append((h, w))
        return sizes


@dataclass(frozen=True)
class AblationConfig:
    dspp_stages: frozenset = frozenset()
    use_cid: bool = False

    def __post_init__(self):
        stages = frozenset(int(s) for s in self.dspp_stages)
        if not stages <= {4, 5, 6}:
            raise ValueError(f"dspp_stages must be a subset of {{4,5,6}}, got {sorted(stages)}")
        object.__setattr__(self, "dspp_stages", stages)

    def describe(self) -> str:
        stages = ",".join(str(s) for s in sorted(self.dspp_stages))
        return f"dspp={{{stages}}} cid={'with' if self.use_cid else 'without'}"


def ablation_matrix(backbone: BackboneConfig | None = None) -> list[AblationConfig]:
    """The six placement/attention configurations, in table order."""
    return [
        AblationConfig(frozenset(), False),
        AblationConfig(frozenset(), True),
        AblationConfig(frozenset({6}), False),
        AblationConfig(frozenset({6}), True),
        AblationConfig(frozenset({5, 6}), True),
        AblationConfig(frozenset({4, 5, 6}), True),
    ]


@dataclass
class Model:
    backbone: BackboneConfig
    ablation: AblationConfig
    params: dict[str, Tensor]
    taps: list[dspp.StageTap] = field(default_factory=list)
    schedule: dspp.RateSchedule | None = None

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return replace(self, params=params)

    def cid_params(self) -> cid.CidParams | None:
        if not self.ablation.use_cid:
            return None
        p = self.params
        return cid.CidParams(p["cid.reduce.weight"], p["cid.reduce.bias"],
                             p["cid.project.weight"], p["cid.project.bias"])

    def dspp_params(self) -> dspp.DsppParams | None:
        if not self.taps:
            return None
        p = self.params
        n = len(self.taps)
        return dspp.DsppParams(
            [p[f"dspp.branch{i}.weight"] for i in range(n)],
            [p[f"dspp.branch{i}.bias"] for i in range(n)],
            p["dspp.fusion.weight"], p["dspp.fusion.bias"])


def stage_taps(backbone: BackboneConfig, stages) -> list[dspp.StageTap]:
    sizes = backbone.stage_sizes()
    return [dspp.StageTap(s, backbone.stage_channels[s - 1], *sizes[s - 1], 2 ** (s - 1))
            for s in sorted(stages)]


def build_model(backbone: BackboneConfig, ablation: AblationConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name, o, c, k):
        params[f"{name}.weight"] = Tensor(ops.fan_in_uniform(rng, (o, c, k, k)), trainable=True)
        params[f"{name}.bias"] = Tensor(np.zeros(o), trainable=True)

    prev = backbone.input_size[2]
    for s, ch in enumerate(backbone.stage_channels, start=1):
        conv(f"stage{s}.conv1", ch, prev, 3)
        conv(f"stage{s}.conv2", ch, ch, 3)
        prev = ch

    if ablation.use_cid:
        cp = cid.init_cid_params(backbone.stage_channels[0], rng)
        params["cid.reduce.weight"], params["cid.reduce.bias"] = cp.reduce_weight, cp.reduce_bias
        params["cid.project.weight"], params["cid.project.bias"] = cp.project_weight, cp.project_bias

    taps = stage_taps(backbone, ablation.dspp_stages)
    schedule = None
    head_in = backbone.stage_channels[-1]
    if taps:
        schedule = dspp.compute_rates(taps, backbone.alpha)
        dp = dspp.init_dspp_params(taps, backbone.dspp_channels, rng)
        for i, (w, b) in enumerate(zip(dp.branch_weights, dp.branch_biases)):
            params[f"dspp.branch{i}.weight"], params[f"dspp.branch{i}.bias"] = w, b
        params["dspp.fusion.weight"], params["dspp.fusion.bias"] = dp.fusion_weight, dp.fusion_bias
        head_in += backbone.dspp_channels

    params["head.weight"] = Tensor(ops.fan_in_uniform(rng, (backbone.classes, head_in)), trainable=True)
    params["head.bias"] = Tensor(np.zeros(backbone.classes), trainable=True)
    return Model(backbone, ablation, params, taps, schedule)


@contextlib.contextmanager
def _layer(name):
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite activation in layer {name}: {exc}") from exc


def forward_features(model: Model, batch: Tensor) -> dict:
    """Run the network and keep intermediate results.

    Returns a dict with ``stage{s}`` activations (after the CID gate for
    stage 1 when enabled), ``cid_map``, ``dspp`` and ``logits``.
    """
    bb = model.backbone
    h, w, c = bb.input_size
    if batch.data.ndim != 4 or batch.shape[1:] != (c, h, w):
        raise ShapeError(f"batch {list(batch.shape)} does not match input [N,{c},{h},{w}]")
    p = model.params
    out: dict = {}
    x = batch
    prev = c
    for s, ch in enumerate(bb.stage_channels, start=1):
        stride = 1 if s == 1 else 2
        with _layer(f"stage{s}.conv1"):
            x = ops.relu(ops.conv2d(x, p[f"stage{s}.conv1.weight"], p[f"stage{s}.conv1.bias"],
                                    ops.Conv2dSpec(prev, ch, (3, 3), stride, 1, 1)))
        with _layer(f"stage{s}.conv2"):
            x = ops.relu(ops.conv2d(x, p[f"stage{s}.conv2.weight"], p[f"stage{s}.conv2.bias"],
                                    ops.Conv2dSpec.same(ch, ch)))
        if s == 1 and model.ablation.use_cid:
            with _layer("cid"):
                gate = cid.attention_map(x, model.cid_params())
                out["cid_map"] = gate
                x = cid.gate_channels(x, gate)
        out[f"stage{s}"] = x
        prev = ch

    pooled = [ops.global_avg_pool(x)]
    if model.taps:
        with _layer("dspp"):
            fused = dspp.dspp_forward([out[f"stage{t.stage_index}"] for t in model.taps],
                                      model.schedule, model.dspp_params(), model.taps)
        out["dspp"] = fused
        pooled.append(ops.global_avg_pool(fused))
    with _layer("head"):
        feats = pooled[0] if len(pooled) == 1 else ops.concat_features(pooled)
        out["logits"] = ops.dense(feats, p["head.weight"], p["head.bias"])
    return out


def forward(model: Model, batch: Tensor) -> Tensor:
    return forward_features(model, batch)["logits"]


def conv_param_count(o: int, c: int, k: int) -> int:
    return o * c * k * k + o


def describe(model: Model) -> str:
    """Text table of layers, output shapes and parameter counts."""
    bb = model.backbone
    h, w, c = bb.input_size
    sizes = bb.stage_sizes()
    rows = [("input", f"[{c},{h},{w}]", 0)]
    prev = c
    for s, ch in enumerate(bb.stage_channels, start=1):
        sh, sw = sizes[s - 1]
        rows.append((f"stage{s}.conv1 (s={1 if s == 1 else 2})", f"[{ch},{sh},{sw}]", conv_param_count(ch, prev, 3)))
        rows.append((f"stage{s}.conv2", f"[{ch},{sh},{sw}]", conv_param_count(ch, ch, 3)))
        if s == 1 and model.ablation.use_cid:
            r = cid.reduced_channels(ch)
            rows.append(("cid (gate)", f"[{ch},{sh},{sw}]", conv_param_count(r, ch, 1) + conv_param_count(1, r, 1)))
        prev = ch
    head_in = bb.stage_channels[-1]
    if model.taps:
        p = bb.dspp_channels
        for i, (tap, entry) in enumerate(zip(model.taps, model.schedule.entries)):
            rows.append((f"dspp.branch{i} (stage {tap.stage_index}, rate {entry.rate})",
                         f"[{p},{tap.height},{tap.width}]", conv_param_count(p, tap.channels, 3)))
        mh, mw = model.schedule.min_resolution
        rows.append(("dspp.fusion", f"[{p},{mh},{mw}]", conv_param_count(p, p * len(model.taps), 1)))
        head_in += p
    rows.append(("head", f"[{bb.classes}]", bb.classes * head_in + bb.classes))
    width = max(len(r[0]) for r in rows) + 2
    lines = [f"{'layer':<{width}}{'output':<14}params"]
    lines += [f"{name:<{width}}{shape:<14}{n}" for name, shape, n in rows]
    lines.append(f"{'total':<{width}}{'':<14}{sum(r[2] for r in rows)}")
    lines.append(f"ablation: {model.ablation.describe()}")
    return "\n".join(lines)
