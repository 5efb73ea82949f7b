"""Datasets: directory ingestion, stratified splits, synthetic lesion blobs.

A directory dataset is ``root/<class_name>/*.pgm|*.png``; class indices
follow the lexicographic order of the class directory names.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio, ops
from .seeding import rng_for

IMAGE_SUFFIXES = {".pgm", ".png"}


@dataclass
class Sample:
    image: np.ndarray            # [C,H,W], values nominally in [0,1]
    label: int
    source_id: str
    box: tuple[int, int, int, int] | None = None  # y0, x0, y1, x1 inclusive


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    class_names: tuple[str, ...] = ("negative", "positive")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    return ratios


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    """Per-class (train, val, test) sizes from rounded cumulative boundaries."""
    r_train, r_val, _ = check_ratios(ratios)
    b1 = min(n, int(math.floor(r_train * n + 0.5)))
    b2 = min(n, max(b1, int(math.floor((r_train + r_val) * n + 0.5))))
    return b1, b2 - b1, n - b2


def stratified_split(by_class: list[list[Sample]], ratios, seed: int, class_names) -> DatasetSplit:
    rng = rng_for(seed, "split")
    out = DatasetSplit(class_names=tuple(class_names))
    for samples in by_class:
        n_train, n_val, _ = split_counts(len(samples), ratios)
        order = rng.permutation(len(samples))
        picked = [samples[i] for i in order]
        out.train += picked[:n_train]
        out.val += picked[n_train:n_train + n_val]
        out.test += picked[n_train + n_val:]
    return out


def prepare_image(img: np.ndarray, input_size) -> np.ndarray:
    """Match channel count (RGB averaged to gray) and resize to (H, W)."""
    h, w, c = input_size
    if img.shape[0] != c:
        gray = img.mean(axis=0, keepdims=True)
        img = np.repeat(gray, c, axis=0) if c > 1 else gray
    return np.ascontiguousarray(ops.resize_array(img, (h, w)))


def load_dataset(root, split_ratios=(0.8, 0.2, 0.0), seed: int = 0, input_size=(64, 64, 1)) -> DatasetSplit:
    root = Path(root)
    check_ratios(split_ratios)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    by_class = []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class directory {d} contains no images")
        by_class.append([Sample(prepare_image(imageio.read_image(f), input_size), label, f"{d.name}/{f.name}")
                         for f in files])
    return stratified_split(by_class, split_ratios, seed, [d.name for d in class_dirs])


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)
    channels: int = 1
    per_class: int = 300
    radius_range: tuple[int, int] = (6, 12)
    intensity: float = 1.0
    noise_amplitude: float = 0.5
    seed: int = 0
    split_ratios: tuple[float, float, float] = (5 / 6, 1 / 6, 0.0)


def blob_image(noise: np.ndarray, center, radius: int, intensity: float) -> np.ndarray:
    """Add a Gaussian bump (sigma = radius / 2) peaking at ``intensity``."""
    h, w = noise.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = radius / 2.0
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    return noise + intensity * np.exp(-d2 / (2.0 * sigma * sigma))


def generate_synthetic(config: SynthConfig = SynthConfig()) -> DatasetSplit:
    """Class 0: uniform noise in [0, amplitude]. Class 1: the same noise plus one blob."""
    h, w = config.image_size
    rmin, rmax = config.radius_range
    if config.per_class < 1:
        raise ValueError("per_class must be >= 1")
    if rmin < 1 or rmax < rmin or 2 * rmax + 1 > min(h, w):
        raise ValueError(f"blob radius range {config.radius_range} does not fit a {h}x{w} image")
    rng = rng_for(config.seed, "synth")
    by_class: list[list[Sample]] = [[], []]
    for label, name in enumerate(("negative", "positive")):
        for i in range(config.per_class):
            img = rng.uniform(0.0, config.noise_amplitude, size=(h, w)) if config.noise_amplitude > 0 else np.zeros((h, w))
            box = None
            if label == 1:
                r = int(rng.integers(rmin, rmax + 1))
                cy = int(rng.integers(r, h - r))
                cx = int(rng.integers(r, w - r))
                img = blob_image(img, (cy, cx), r, config.intensity)
                box = (cy - r, cx - r, cy + r, cx + r)
            chw = np.repeat(img[None], config.channels, axis=0)
            by_class[label].append(Sample(chw, label, f"synth/{name}/{i:05d}", box))
    return stratified_split(by_class, config.split_ratios, config.seed, ("negative", "positive"))


def materialize(split: DatasetSplit, root) -> Path:
    """Write every sample as 8-bit PGM under ``root/<class>/`` plus ``boxes.csv``."""
    root = Path(root)
    rows = []
    for part in ("train", "val", "test"):
        for s in split.split(part):
            cls = split.class_names[s.label]
            name = s.source_id.rsplit("/", 1)[-1] + ".pgm"
            out = root / cls / name
            out.parent.mkdir(parents=True, exist_ok=True)
            imageio.write_pgm(out, s.image.mean(axis=0))
            y0, x0, y1, x1 = s.box if s.box else ("", "", "", "")
            rows.append((f"{cls}/{name}", part, s.label, y0, x0, y1, x1))
    rows.sort()
    with open(root / "boxes.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["file", "split", "label", "y0", "x0", "y1", "x1"])
        wr.writerows(rows)
    return root
