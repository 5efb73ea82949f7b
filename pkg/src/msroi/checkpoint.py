"""Versioned binary checkpoints.

Layout (all integers little-endian u32)::

    b"DSPP" | version | config length | config JSON (utf-8)
    then per tensor: name length | name | rank | dims... | float64 LE data

Tensors named ``param/<name>`` are model parameters, ``velocity/<name>``
optimizer state.  The config JSON carries the architecture, epoch counter,
history and any run metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import AblationConfig, BackboneConfig, Model, build_model
from .tensor import Tensor

MAGIC = b"DSPP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    backbone: BackboneConfig
    ablation: AblationConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Model, velocities=None, epoch=0, history=(), meta=None) -> "Checkpoint":
        return cls(model.backbone, model.ablation,
                   {k: v.data.copy() for k, v in model.params.items()},
                   {k: np.asarray(v).copy() for k, v in (velocities or {}).items()},
                   epoch, list(history), dict(meta or {}))

    def to_model(self) -> Model:
        model = build_model(self.backbone, self.ablation, seed=0)
        missing = set(model.params) ^ set(self.params)
        if missing:
            raise CheckpointError(f"checkpoint parameters do not match architecture: {sorted(missing)}")
        params = {}
        for name, ref in model.params.items():
            arr = self.params[name]
            if arr.shape != ref.shape:
                raise CheckpointError(f"{name}: checkpoint shape {list(arr.shape)} vs model {list(ref.shape)}")
            params[name] = Tensor(arr, trainable=True)
        return model.with_params(params)

    def config_dict(self) -> dict:
        bb = asdict(self.backbone)
        return {
            "backbone": {k: list(v) if isinstance(v, tuple) else v for k, v in bb.items()},
            "ablation": {"dspp_stages": sorted(self.ablation.dspp_stages), "use_cid": self.ablation.use_cid},
            "epoch": self.epoch,
            "history": self.history,
            "meta": self.meta,
        }


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config_dict(), sort_keys=True, allow_nan=True).encode("utf-8")
    parts = [MAGIC, _u32(ckpt.version), _u32(len(cfg)), cfg]
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"velocity/{k}", v) for k, v in ckpt.velocities.items()]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts += [_u32(len(nb)), nb, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(buf):
            raise CheckpointError("truncated checkpoint")
        (v,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n = u32()
    cfg = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    params, velocities = {}, {}
    while pos < len(buf):
        nl = u32()
        name = buf[pos:pos + nl].decode("utf-8")
        pos += nl
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        end = pos + 8 * count
        if end > len(buf):
            raise CheckpointError(f"truncated data for {name}")
        arr = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
        pos = end
        kind, _, key = name.partition("/")
        {"param": params, "velocity": velocities}.get(kind, {})[key] = arr
    bb = cfg["backbone"]
    backbone = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in bb.items()})
    ab = cfg["ablation"]
    ablation = AblationConfig(frozenset(ab["dspp_stages"]), bool(ab["use_cid"]))
    return Checkpoint(backbone, ablation, params, velocities, cfg["epoch"], cfg["history"], cfg["meta"], version)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    return path


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
