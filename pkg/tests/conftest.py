import numpy as np
import pytest

from msroi.data import Sample, SynthConfig, generate_synthetic, stratified_split
from msroi.model import BackboneConfig

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, title, ok, detail)."""

    def record(number, title, ok, detail=""):
        _CRITERIA[number] = (title, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_backbone():
    return BackboneConfig(input_size=(16, 16, 1), stage_channels=(4, 4, 4, 4, 4, 4), dspp_channels=4)


@pytest.fixture(scope="session")
def tiny_blobs():
    """Small 16x16 blob dataset: 24 per class, 75/25 split."""
    cfg = SynthConfig(image_size=(16, 16), per_class=24, radius_range=(2, 4), noise_amplitude=0.3,
                      seed=7, split_ratios=(0.75, 0.25, 0.0))
    return generate_synthetic(cfg)


def make_split(images, labels, ratios=(1.0, 0.0, 0.0), seed=0):
    by_class = [[], []]
    for i, (img, lab) in enumerate(zip(images, labels)):
        by_class[lab].append(Sample(np.asarray(img, dtype=float), int(lab), f"s{i}"))
    return stratified_split(by_class, ratios, seed, ("negative", "positive"))
