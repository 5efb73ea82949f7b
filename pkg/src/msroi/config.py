"""Flat ``key = value`` run configuration.

Every key has a default, so an empty file is a valid configuration.  Lines
starting with ``#`` (or trailing ``# ...``) are comments.  Command-line
flags override file values; ``MSROI_OUTPUT_DIR`` overrides the file's
``output_dir`` but not an explicit ``--out``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import SynthConfig
from .model import AblationConfig, BackboneConfig
from .seeding import derive_seed
from .train import OptimConfig

OUTPUT_ENV = "MSROI_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on", "with"):
        return True
    if t in ("0", "false", "no", "off", "without"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip().strip("{}[]()")
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip().strip("{}[]()")
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    alpha: int = 3
    # backbone
    input_height: int = 64
    input_width: int = 64
    input_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 96, 128, 160)
    classes: int = 2
    dspp_channels: int = 64
    # ablation
    dspp_stages: tuple[int, ...] = (4, 5, 6)
    use_cid: bool = True
    # optimiser
    lr_max: float = 0.1
    lr_min: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    grad_clip: float = 1.0
    # data; empty split_ratios means (0.8,0.2,0) for directories, (5/6,1/6,0) for synthetic
    data: str = ""
    synth: bool = False
    split_ratios: tuple[float, ...] = ()
    synth_per_class: int = 300
    synth_radius_min: int = 6
    synth_radius_max: int = 12
    synth_intensity: float = 1.0
    synth_noise: float = 0.5
    # outputs
    output_dir: str = "runs"
    gradcam_layer: int = 6

    def backbone(self) -> BackboneConfig:
        return BackboneConfig((self.input_height, self.input_width, self.input_channels),
                              self.stage_channels, self.classes, self.alpha, self.dspp_channels)

    def ablation(self) -> AblationConfig:
        return AblationConfig(frozenset(self.dspp_stages), self.use_cid)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr_max, self.lr_min, self.momentum, self.weight_decay,
                           self.epochs, self.batch_size, self.seed, self.grad_clip)

    def synth_config(self) -> SynthConfig:
        ratios = self.split_ratios or SynthConfig.split_ratios
        return SynthConfig((self.input_height, self.input_width), self.input_channels, self.synth_per_class,
                           (self.synth_radius_min, self.synth_radius_max), self.synth_intensity,
                           self.synth_noise, derive_seed(self.seed, "synth"), tuple(ratios))

    def directory_ratios(self) -> tuple[float, ...]:
        return tuple(self.split_ratios) or (0.8, 0.2, 0.0)

    @property
    def model_seed(self) -> int:
        return derive_seed(self.seed, "model")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_PARSERS = {}
for _f in fields(RunConfig):
    _default = _f.default
    if isinstance(_default, bool):
        _PARSERS[_f.name] = _bool
    elif isinstance(_default, int):
        _PARSERS[_f.name] = int
    elif isinstance(_default, float):
        _PARSERS[_f.name] = float
    elif _f.name == "split_ratios":
        _PARSERS[_f.name] = _floats
    elif isinstance(_default, tuple):
        _PARSERS[_f.name] = _ints
    else:
        _PARSERS[_f.name] = str


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text.strip())
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc


def parse_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        values[key] = parse_value(key, value)
    return values


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = {}
    if path:
        try:
            values.update(parse_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if env.get(OUTPUT_ENV):
        values["output_dir"] = env[OUTPUT_ENV]
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = parse_value(k, v) if isinstance(v, str) and _PARSERS.get(k) is not str else v
    try:
        cfg = replace(RunConfig(), **values)
        cfg.backbone(), cfg.ablation(), cfg.optim()
        if cfg.split_ratios and len(cfg.split_ratios) != 3:
            raise ValueError("split_ratios needs three values")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
