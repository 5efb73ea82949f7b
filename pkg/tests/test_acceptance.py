"""Acceptance criteria, one test each.

Every test records a pass/fail line through the ``criterion`` fixture; the
lines are printed in the "acceptance criteria" section of the pytest summary.
The end-to-end criteria (9, 10) train the default model for 20 epochs and
take several minutes.
"""

import csv
import math
import time
import warnings

import numpy as np
import pytest

from msroi import checkpoint as ckpt_io
from msroi import ops
from msroi.cid import CidParams, attention_factor, attention_map, cid_forward, init_cid_params
from msroi.cli import main
from msroi.config import RunConfig
from msroi.data import generate_synthetic
from msroi.dspp import StageTap, compute_rates, dspp_forward, init_dspp_params
from msroi.evaluate import ConfusionCounts, confusion, grad_cam, metrics, predict_scores, roc_auc, \
    top_decile_mass_inside
from msroi.model import AblationConfig, build_model, forward
from msroi.tensor import Tensor, grad_check, mul, sum_all
from msroi.train import OptimConfig, cosine_lr, sgd_step, train
from oracles import conv2d_loops, kink_free, pairwise_auc, recount

EPS = 1e-3
GRAD_TOL = 1e-4
LOCALIZATION_LAYER = 3


def test_01_rate_rule_conformance(criterion):
    t0 = time.perf_counter()
    worst_ratio = worst_min = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        alpha = int(rng.integers(1, 7))
        taps = [StageTap(1 + i, 4, int(rng.integers(1, 129)), int(rng.integers(1, 129)), 1) for i in range(n)]
        sched = compute_rates(taps, alpha)
        small = min(taps, key=lambda t: t.height * t.width)
        for t, e in zip(taps, sched.entries):
            want = alpha * math.sqrt((t.height * t.width) / (small.height * small.width))
            worst_ratio = max(worst_ratio, abs(e.unrounded_rate - want))
        worst_min = max(worst_min, abs(min(e.unrounded_rate for e in sched.entries) - alpha))
    pyramid = [StageTap(4, 8, 56, 56, 8), StageTap(5, 8, 28, 28, 16), StageTap(6, 8, 14, 14, 32)]
    rates = compute_rates(pyramid, 3).rates
    elapsed = time.perf_counter() - t0
    ok = worst_ratio <= 1e-12 and worst_min <= 1e-12 and rates == [12, 6, 3] and elapsed < 1.0
    criterion(1, "rate rule conformance", ok,
              f"ratio err {worst_ratio:.1e}, min err {worst_min:.1e}, rates {rates}, {elapsed:.3f}s")
    assert ok


def test_02_receptive_field_constancy(criterion):
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for levels in range(1, 6):
        for base_pow in range(levels - 1, levels + 4):
            base = 2 ** base_pow
            for alpha in (1, 2, 3, 4):
                taps = [StageTap(1 + i, 4, base >> i, base >> i, 1 << i) for i in range(levels)]
                sched = compute_rates(taps, alpha)
                prods = [t.stride * e.unrounded_rate for t, e in zip(taps, sched.entries)]
                worst = max(worst, max(prods) - min(prods))
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    criterion(2, "receptive field constancy", ok, f"{checked} pyramids, max spread {worst:.1e}, {elapsed:.3f}s")
    assert ok


def _kink_free_point(f, draw, rng, tries=100):
    for _ in range(tries):
        x = Tensor(draw(rng))
        if kink_free(f, x, EPS):
            return x
    raise AssertionError("no kink-free instance found")


def _grad_errors(trial):
    rng = np.random.default_rng(1000 + trial)
    errs = {}

    for d in (1, 2, 3, 4):
        spec = ops.Conv2dSpec.same(2, 2, 3, d)
        w, b = Tensor(rng.normal(size=(2, 2, 3, 3))), Tensor(rng.normal(size=2))
        proj = Tensor(rng.normal(size=(1, 2, 9, 9)))
        x = Tensor(rng.normal(size=(1, 2, 9, 9)))
        errs[f"conv d={d} (input)"] = grad_check(lambda t: sum_all(mul(ops.conv2d(t, w, b, spec), proj)), x, EPS)
        errs[f"conv d={d} (weight)"] = grad_check(lambda t: sum_all(mul(ops.conv2d(x, t, b, spec), proj)), w, EPS)

    p = init_cid_params(4, rng)
    p = CidParams(p.reduce_weight, Tensor(rng.normal(size=1) * 0.2), p.project_weight, p.project_bias)
    proj = Tensor(rng.normal(size=(1, 4, 6, 6)))
    f_cid = lambda t: sum_all(mul(cid_forward(t, p), proj))
    errs["cid"] = grad_check(f_cid, _kink_free_point(f_cid, lambda r: r.normal(size=(1, 4, 6, 6)), rng), EPS)

    taps = [StageTap(5, 2, 4, 4, 16), StageTap(6, 2, 2, 2, 32)]
    sched = compute_rates(taps, 1)
    dp = init_dspp_params(taps, 2, rng)
    dp.branch_biases = [Tensor(rng.normal(size=2) * 0.1) for _ in taps]
    dp.fusion_bias = Tensor(rng.normal(size=2) * 0.1)
    small = Tensor(rng.normal(size=(1, 2, 2, 2)))
    proj = Tensor(rng.normal(size=(1, 2, 2, 2)))
    f_dspp = lambda t: sum_all(mul(dspp_forward([t, small], sched, dp), proj))
    errs["dspp"] = grad_check(f_dspp, _kink_free_point(f_dspp, lambda r: r.normal(size=(1, 2, 4, 4)), rng), EPS)

    x, w, b = (Tensor(rng.normal(size=s)) for s in ((3, 5), (4, 5), (4,)))
    proj = Tensor(rng.normal(size=(3, 4)))
    errs["dense"] = max(grad_check(lambda t: sum_all(mul(ops.dense(t, w, b), proj)), x, EPS),
                        grad_check(lambda t: sum_all(mul(ops.dense(x, t, b), proj)), w, EPS))

    labels = rng.integers(0, 3, size=4)
    errs["loss"] = grad_check(lambda t: ops.softmax_cross_entropy(t, labels), Tensor(rng.normal(size=(4, 3))), EPS)
    return errs


def test_03_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for trial in range(10):
        for k, v in _grad_errors(trial).items():
            worst[k] = max(worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < 30.0
    criterion(3, "gradient correctness", ok, f"worst {worst[top]:.1e} ({top}), {elapsed:.1f}s")
    assert ok, worst


def test_04_conv_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        dil, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        pad = int(rng.integers(0, dil * (k - 1) // 2 + 2))
        h, w = int(rng.integers(dil * (k - 1) + 1, 10)), int(rng.integers(dil * (k - 1) + 1, 10))
        x, wt, b = rng.normal(size=(1, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), ops.Conv2dSpec(c, o, (k, k), stride, dil, pad)).data
        worst = max(worst, float(np.abs(got - conv2d_loops(x, wt, b, stride, dil, pad)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10.0
    criterion(4, "convolution oracle equivalence", ok, f"200 instances, max abs diff {worst:.1e}, {elapsed:.2f}s")
    assert ok


def test_05_cid_contracts(criterion):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    r = 2
    zero = CidParams(Tensor(rng.normal(size=(r, 8, 1, 1))), Tensor(rng.normal(size=r)),
                     Tensor(np.zeros((1, r, 1, 1))), Tensor(np.zeros(1)))
    half = np.array_equal(cid_forward(x, zero).data, 0.5 * x.data)
    p = init_cid_params(8, rng)
    gate = attention_map(x, p).data
    consistent = np.array_equal(cid_forward(x, p).data, x.data * np.broadcast_to(gate, x.shape))
    factors = attention_factor(256, 1) == 256 and all(attention_factor(c, c) == 1 for c in (1, 16, 160))
    ok = half and consistent and factors
    criterion(5, "CID contracts", ok, f"half-gate {half}, gate consistency {consistent}, attention factor {factors}")
    assert ok


def test_06_metric_auc_oracles(criterion):
    worst_auc, count_mismatch = 0.0, 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 11, size=n) / 10.0 if seed % 2 else rng.uniform(size=n)
        thr = float(rng.uniform())
        tp, fp, fn, tn = recount(scores, labels, thr)
        c = confusion(scores, labels, thr)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # 0/0 f1 when tp == 0 is expected here
            m = metrics(c) if tp + fp and tp + fn else None
        if (c.tp, c.fp, c.fn, c.tn) != (tp, fp, fn, tn):
            count_mismatch += 1
        if m is not None:
            acc, prec, rec = (tp + tn) / n, tp / (tp + fp), tp / (tp + fn)
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            if max(abs(a - b) for a, b in zip(m.as_tuple(), (acc, prec, rec, f1))) > 1e-12:
                count_mismatch += 1
        worst_auc = max(worst_auc, abs(roc_auc(scores, labels).auc - pairwise_auc(scores, labels)))
    worked = metrics(ConfusionCounts(tp=2, fp=1, fn=1, tn=6))
    worked_ok = worked.accuracy == 0.8 and abs(worked.f1 - 2 / 3) <= 1e-12
    auc_case = roc_auc([0.8, 0.3, 0.6, 0.2], [1, 1, 0, 0]).auc
    ok = count_mismatch == 0 and worst_auc <= 1e-12 and worked_ok and abs(auc_case - 0.75) <= 1e-12
    criterion(6, "metric and AUC oracle equivalence", ok,
              f"1000 instances, {count_mismatch} mismatches, max AUC diff {worst_auc:.1e}, "
              f"worked acc {worked.accuracy} f1 {worked.f1:.6f}, AUC case {auc_case}")
    assert ok


def test_07_schedule_and_optimizer(criterion):
    ends = (cosine_lr(0, 20), cosine_lr(20, 20))
    cfg = OptimConfig(momentum=0.9, weight_decay=0.0)
    p, v = {"w": Tensor([1.0])}, {}
    for _ in range(2):
        p, v = sgd_step(p, {"w": np.array([1.0])}, v, 0.1, cfg)
    theta2, v2 = float(p["w"].data[0]), float(v["w"][0])
    ok = ends == (0.1, 1e-5) and theta2 == 0.71 and v2 == -0.19
    criterion(7, "schedule endpoints and momentum recurrence", ok, f"lr ends {ends}, theta2 {theta2!r}, v2 {v2!r}")
    assert ok


def test_08_determinism_and_persistence(criterion, tmp_path, tiny_backbone, tiny_blobs):
    def run():
        m = build_model(tiny_backbone, AblationConfig({4, 5, 6}, True), 21)
        return train(m, tiny_blobs, OptimConfig(epochs=3, batch_size=8)).checkpoint

    a, b = run(), run()
    identical = ckpt_io.encode(a) == ckpt_io.encode(b)
    x = Tensor(np.stack([s.image for s in tiny_blobs.val]))
    before = forward(a.to_model(), x).data
    after = forward(ckpt_io.load(ckpt_io.save(a, tmp_path / "a.ckpt")).to_model(), x).data
    round_trip = np.array_equal(before, after)
    ok = identical and round_trip
    criterion(8, "determinism and persistence", ok, f"bitwise-identical runs {identical}, round-trip logits {round_trip}")
    assert ok


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    """Default CLI training run: ({4,5,6}, CID), 20 epochs, 500/100 blob images."""
    out = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    code = main(["train", "--synth", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    return out, code, elapsed


@pytest.mark.slow
def test_09_end_to_end_synthetic(criterion, benchmark_run, tmp_path):
    out, code, elapsed = benchmark_run
    cfg = RunConfig()
    history = list(csv.DictReader((out / "history.csv").read_text().splitlines())) if code == 0 else []
    accs = [float(r["val_accuracy"]) for r in history]
    ck = ckpt_io.load(out / "final.ckpt") if code == 0 else None
    split = generate_synthetic(cfg.synth_config())
    sizes = (len(split.train), len(split.val), split.train[0].image.shape)
    trained_ok = (code == 0 and len(history) == cfg.epochs == 20 and sorted(ck.ablation.dspp_stages) == [4, 5, 6]
                  and ck.ablation.use_cid and sizes == (500, 100, (1, 64, 64))
                  and max(accs) >= 0.95 and elapsed < 600.0)

    # ablate: all six rows on the same default dataset, one epoch each to bound runtime
    t1 = time.perf_counter()
    ab_code = main(["ablate", "--synth", "--epochs", "1", "--out", str(tmp_path)])
    ab_time = time.perf_counter() - t1
    rows = list(csv.DictReader((tmp_path / "ablation.csv").read_text().splitlines())) if ab_code == 0 else []
    ablate_ok = ab_code == 0 and len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    order = " ".join(f"{r['dspp_stages']}/{r['cid']}={float(r['accuracy']):.3f}" for r in rows)

    ok = trained_ok and ablate_ok
    criterion(9, "end-to-end synthetic benchmark", ok,
              f"train {elapsed:.0f}s, best val acc {max(accs, default=float('nan')):.3f} "
              f"(final {accs[-1] if accs else float('nan'):.3f}); ablate {ab_time:.0f}s, 6 rows: {order}")
    assert ok


@pytest.mark.slow
def test_10_attention_localization(criterion, benchmark_run):
    out, code, _ = benchmark_run
    assert code == 0
    model = ckpt_io.load(out / "final.ckpt").to_model()
    split = generate_synthetic(RunConfig().synth_config())
    positives = [s for s in split.val if s.label == 1]
    probs = predict_scores(model, np.stack([s.image for s in positives]))
    correct = [s for s, p in zip(positives, probs) if p[1] >= 0.5]
    masses = [top_decile_mass_inside(grad_cam(model, Tensor(s.image[None]), 1, LOCALIZATION_LAYER), s.box)
              for s in correct]
    share = float(np.mean([m >= 0.7 for m in masses])) if masses else 0.0
    ok = share >= 0.8
    criterion(10, "attention localization", ok,
              f"stage {LOCALIZATION_LAYER}: {share:.1%} of {len(correct)} correct positives with "
              f">=70% top-decile mass in box (median mass {np.median(masses) if masses else float('nan'):.3f})")
    assert ok
