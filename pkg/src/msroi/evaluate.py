"""Binary classification metrics, ROC/AUC and Grad-CAM heatmaps."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import imageio, ops
from .model import Model, forward, forward_features
from .tensor import Tensor, backward, no_grad, take


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise ValueError("confusion needs at least one sample")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(int(np.sum(pred & pos)), int(np.sum(pred & ~pos)),
                           int(np.sum(~pred & pos)), int(np.sum(~pred & ~pos)))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()  # metrics that hit 0/0 and were set to 0

    def as_tuple(self):
        return self.accuracy, self.precision, self.recall, self.f1


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> Metrics:
    if c.total <= 0:
        raise ValueError("metrics of an empty confusion table")
    flags: list[str] = []
    accuracy = (c.tp + c.tn) / c.total
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    if flags:
        warnings.warn(f"0/0 in {', '.join(flags)}; reported as 0", RuntimeWarning, stacklevel=2)
    return Metrics(accuracy, precision, recall, f1, tuple(flags))


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr, self.tpr))


def roc_auc(scores, labels) -> RocCurve:
    """ROC swept over distinct scores (descending), area by trapezoids."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(s[1:] != s[:-1])[0], s.size - 1]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    fpr = np.r_[0.0, fp[ends] / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(tuple(fpr.tolist()), tuple(tpr.tolist()), tuple(s[ends].tolist()), auc)


def predict_scores(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax probabilities [N,K] for a stack of [C,H,W] images."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(model, Tensor(images[i:i + batch_size]))
            out.append(ops.softmax(logits.data))
    return np.concatenate(out) if out else np.zeros((0, model.backbone.classes))


def evaluate_samples(model: Model, samples, threshold: float = 0.5) -> dict:
    """Accuracy/precision/recall/F1/AUC on a list of samples; NaN when empty."""
    keys = ("accuracy", "precision", "recall", "f1", "auc")
    if not samples:
        return {k: float("nan") for k in keys}
    probs = predict_scores(model, np.stack([s.image for s in samples]))
    labels = np.array([s.label for s in samples])
    scores = probs[:, 1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        m = metrics(confusion(scores, labels, threshold))
    try:
        auc = roc_auc(scores, labels).auc
    except ValueError:
        auc = float("nan")
    return {"accuracy": m.accuracy, "precision": m.precision, "recall": m.recall, "f1": m.f1,
            "auc": auc, "scores": scores, "labels": labels}


def grad_cam(model: Model, image: Tensor, target_class: int, layer: int = 6) -> np.ndarray:
    """Gradient-weighted activation map of stage ``layer``, resized to the input, in [0, 1]."""
    if layer not in range(1, 7):
        raise ValueError(f"layer must be a stage index 1..6, got {layer}")
    if image.data.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"grad_cam takes one image [1,C,H,W], got {list(image.shape)}")
    if not 0 <= target_class < model.backbone.classes:
        raise ValueError(f"target_class {target_class} out of range")
    feats = forward_features(model, image)
    act = feats[f"stage{layer}"]
    score = take(feats["logits"], (0, target_class))
    grad = backward(score, [act])[act].data[0]       # [C,h,w]
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, act.data[0], axes=1), 0.0)
    h, w = image.shape[2:]
    cam = np.maximum(ops.resize_array(cam, (h, w)), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return (cam - lo) / (hi - lo)


def top_decile_mass_inside(heatmap: np.ndarray, box) -> float:
    """Share of the heat carried by the top 10% pixels that falls inside ``box``."""
    flat = heatmap.reshape(-1)
    k = max(1, int(np.ceil(0.1 * flat.size)))
    top = np.argsort(-flat, kind="stable")[:k]
    total = flat[top].sum()
    if total <= 0:
        return 0.0
    ys, xs = np.unravel_index(top, heatmap.shape)
    y0, x0, y1, x1 = box
    inside = (ys >= y0) & (ys <= y1) & (xs >= x0) & (xs <= x1)
    return float(flat[top][inside].sum() / total)


def overlay(gray: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Linear blend toward pure red by heat: rgb = (1 - h) * gray + h * (1, 0, 0)."""
    g = np.clip(gray, 0.0, 1.0)
    h = np.clip(heat, 0.0, 1.0)
    base = (1.0 - h) * g
    return np.stack([base + h, base, base], axis=-1)


def write_heatmap(path, heat: np.ndarray) -> None:
    imageio.write_pgm(path, heat)


def write_overlay(path, gray: np.ndarray, heat: np.ndarray) -> None:
    imageio.write_ppm(path, overlay(gray, heat))


def write_metrics_csv(path, values: dict) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k in ("accuracy", "precision", "recall", "f1", "auc"):
            if k in values:
                wr.writerow([k, repr(float(values[k]))])


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["threshold", "fpr", "tpr"])
        wr.writerow(["inf", repr(curve.fpr[0]), repr(curve.tpr[0])])
        for t, f, p in zip(curve.thresholds, curve.fpr[1:], curve.tpr[1:]):
            wr.writerow([repr(t), repr(f), repr(p)])
