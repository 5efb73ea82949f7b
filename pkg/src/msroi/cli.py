"""msroi command line.

Subcommands: rates, synth, train, ablate, eval, finetune, gradcam.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import evaluate
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .dspp import compute_rates
from .imageio import read_image
from .model import ablation_matrix, build_model, describe, forward_features, stage_taps
from .tensor import Tensor, no_grad
from .train import TrainingAborted, finetune, train, write_history_csv

log = logging.getLogger("msroi")


class UsageError(Exception):
    pass


# flag name -> config key
COMMON_FLAGS = {
    "seed": int, "alpha": int, "epochs": int, "batch_size": int, "lr_max": float, "lr_min": float,
    "momentum": float, "weight_decay": float, "grad_clip": float, "dspp_stages": str, "data": str, "split_ratios": str,
    "synth_per_class": int, "stage_channels": str, "dspp_channels": int,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--out", help="output directory (overrides config and $MSROI_OUTPUT_DIR)")
    for name, typ in COMMON_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--synth", dest="synth", action="store_const", const=True, default=None,
                   help="use the synthetic blob dataset")
    cid = p.add_mutually_exclusive_group()
    cid.add_argument("--cid", dest="use_cid", action="store_const", const=True, default=None)
    cid.add_argument("--no-cid", dest="use_cid", action="store_const", const=False)


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in list(COMMON_FLAGS) + ["synth", "use_cid"]}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.out:
        overrides["output_dir"] = args.out
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_meta(cfg: RunConfig) -> dict:
    if cfg.data:
        return {"source": "directory", "root": cfg.data, "split_ratios": list(cfg.directory_ratios()),
                "seed": cfg.seed, "input_size": [cfg.input_height, cfg.input_width, cfg.input_channels]}
    sc = cfg.synth_config()
    return {"source": "synthetic", "image_size": list(sc.image_size), "channels": sc.channels,
            "per_class": sc.per_class, "radius_range": list(sc.radius_range), "intensity": sc.intensity,
            "noise_amplitude": sc.noise_amplitude, "seed": sc.seed, "split_ratios": list(sc.split_ratios)}


def _dataset_from_meta(meta: dict) -> data_mod.DatasetSplit:
    if meta["source"] == "directory":
        return data_mod.load_dataset(meta["root"], tuple(meta["split_ratios"]), meta["seed"], tuple(meta["input_size"]))
    return data_mod.generate_synthetic(data_mod.SynthConfig(
        tuple(meta["image_size"]), meta["channels"], meta["per_class"], tuple(meta["radius_range"]),
        meta["intensity"], meta["noise_amplitude"], meta["seed"], tuple(meta["split_ratios"])))


def _require_data(cfg: RunConfig) -> None:
    if not cfg.data and not cfg.synth:
        raise UsageError("no dataset: pass --data DIR or --synth")


def _check_compatible(model, split: data_mod.DatasetSplit) -> None:
    h, w, c = model.backbone.input_size
    for part in ("train", "val", "test"):
        s = split.split(part)
        if s and s[0].image.shape != (c, h, w):
            got = s[0].image.shape
            names = ("channels", "height", "width")
            bad = [f"{n}: checkpoint {e} vs data {g}" for n, e, g in zip(names, (c, h, w), got) if e != g]
            raise CheckpointError("incompatible checkpoint; " + "; ".join(bad))
    if split.num_classes != model.backbone.classes:
        raise CheckpointError(f"incompatible checkpoint; classes: checkpoint {model.backbone.classes} "
                              f"vs data {split.num_classes}")


# -- subcommands ---------------------------------------------------------------


def cmd_rates(args) -> int:
    cfg = _config(args)
    taps = stage_taps(cfg.backbone(), cfg.dspp_stages)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["stage_index", "H", "W", "stride", "unrounded_rate", "rate"])
    if taps:
        sched = compute_rates(taps, cfg.alpha)
        for tap, e in zip(taps, sched.entries):
            wr.writerow([tap.stage_index, tap.height, tap.width, tap.stride, repr(e.unrounded_rate), e.rate])
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    split = data_mod.generate_synthetic(cfg.synth_config())
    root = data_mod.materialize(split, _out_dir(cfg))
    print(f"wrote {len(split.train) + len(split.val) + len(split.test)} images to {root}")
    return 0


def _load_data(cfg: RunConfig):
    _require_data(cfg)
    meta = {"data": _data_meta(cfg)}
    return _dataset_from_meta(meta["data"]), meta


def cmd_train(args) -> int:
    cfg = _config(args)
    model = build_model(cfg.backbone(), cfg.ablation(), cfg.model_seed)
    if args.describe:
        print(describe(model))
        return 0
    split, meta = _load_data(cfg)
    out = _out_dir(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    result = train(model, split, cfg.optim(), meta=meta)
    ckpt_io.save(result.checkpoint, out / "final.ckpt")
    ckpt_io.save(result.best, out / "best.ckpt")
    write_history_csv(out / "history.csv", result.history)
    if split.test:
        values = evaluate.evaluate_samples(result.checkpoint.to_model(), split.test)
        evaluate.write_metrics_csv(out / "metrics.csv", values)
    last = result.history[-1] if result.history else None
    if last:
        print(f"epochs {len(result.history)}  train_loss {last['train_loss']:.4f}  "
              f"val_accuracy {last['val_accuracy']:.4f}")
    print(f"artifacts in {out}")
    return 0


ABLATION_FIELDS = ("row", "stage4", "stage5", "stage6", "cid", "dspp_stages", "accuracy", "precision",
                   "recall", "f1", "auc", "status")


def _ablation_row(job):
    i, cfg, ablation, out = job
    split, meta = _load_data(cfg)
    model = build_model(cfg.backbone(), ablation, cfg.model_seed)
    row = {"row": i, "stage4": "x" if 4 in ablation.dspp_stages else "",
           "stage5": "x" if 5 in ablation.dspp_stages else "",
           "stage6": "x" if 6 in ablation.dspp_stages else "",
           "cid": "with" if ablation.use_cid else "without",
           "dspp_stages": "{" + ",".join(str(s) for s in sorted(ablation.dspp_stages)) + "}"}
    try:
        result = train(model, split, cfg.optim(), meta=meta)
    except (TrainingAborted, ValueError) as exc:
        return {**row, **{k: "" for k in ("accuracy", "precision", "recall", "f1", "auc")}, "status": str(exc)}
    ckpt_io.save(result.checkpoint, out / f"ablation_row{i}.ckpt")
    write_history_csv(out / f"ablation_row{i}_history.csv", result.history)
    last = result.history[-1] if result.history else {}
    metrics = {k: repr(float(last.get(f"val_{k}", float("nan")))) for k in ("accuracy", "precision", "recall", "f1", "auc")}
    return {**row, **metrics, "status": "ok"}


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _require_data(cfg)
    out = _out_dir(cfg)
    jobs = [(i, cfg, ab, out) for i, ab in enumerate(ablation_matrix(cfg.backbone()), start=1)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_row, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_ablation_row(job))
            log.info("ablation row %d: %s", job[0], rows[-1]["status"])
    buf = io.StringIO()
    wr = csv.DictWriter(buf, ABLATION_FIELDS, lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    (out / "ablation.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def _split_for(cfg: RunConfig, ck) -> data_mod.DatasetSplit:
    if cfg.data or cfg.synth:
        split, _ = _load_data(cfg)
    elif "data" in ck.meta:
        split = _dataset_from_meta(ck.meta["data"])
    else:
        raise UsageError("checkpoint carries no dataset description; pass --data or --synth")
    return split


def cmd_eval(args) -> int:
    cfg = _config(args)
    ck = ckpt_io.load(args.checkpoint)
    model = ck.to_model()
    split = _split_for(cfg, ck)
    _check_compatible(model, split)
    samples = split.split(args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    values = evaluate.evaluate_samples(model, samples)
    out = _out_dir(cfg)
    evaluate.write_metrics_csv(out / "metrics.csv", values)
    try:
        evaluate.write_roc_csv(out / "roc.csv", evaluate.roc_auc(values["scores"], values["labels"]))
    except ValueError:
        log.warning("ROC undefined: split has a single class")
    for k in ("accuracy", "precision", "recall", "f1", "auc"):
        print(f"{k},{values[k]!r}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    ck = ckpt_io.load(args.checkpoint)
    split, meta = _load_data(cfg)
    out = _out_dir(cfg)
    result = finetune(ck, split, cfg.optim(), meta=meta)
    ckpt_io.save(result.checkpoint, out / "finetune.ckpt")
    ckpt_io.save(result.best, out / "finetune_best.ckpt")
    write_history_csv(out / "history.csv", result.history)
    print(f"fine-tuned {len(result.history)} epochs; artifacts in {out}")
    return 0


def cmd_gradcam(args) -> int:
    cfg = _config(args)
    ck = ckpt_io.load(args.checkpoint)
    model = ck.to_model()
    h, w, c = model.backbone.input_size
    img = data_mod.prepare_image(read_image(args.image), (h, w, c))
    x = Tensor(img[None])
    with no_grad():
        probs = evaluate.predict_scores(model, img[None])[0]
    target = int(np.argmax(probs)) if args.target_class is None else args.target_class
    layer = args.layer if args.layer is not None else cfg.gradcam_layer
    heat = evaluate.grad_cam(model, x, target, layer)
    out = _out_dir(cfg)
    stem = Path(args.image).stem
    gray = img.mean(axis=0)
    evaluate.write_heatmap(out / f"{stem}_gradcam.pgm", heat)
    evaluate.write_overlay(out / f"{stem}_gradcam_overlay.ppm", gray, heat)
    written = [f"{stem}_gradcam.pgm", f"{stem}_gradcam_overlay.ppm"]
    if model.ablation.use_cid:
        with no_grad():
            feats = forward_features(model, x)
        amap = feats["cid_map"].data[0, 0]
        evaluate.write_heatmap(out / f"{stem}_cid_attention.pgm", amap)
        written.append(f"{stem}_cid_attention.pgm")
    print(f"class {target} (p={probs[target]:.4f}), layer {layer}: " + ", ".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msroi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rates", help="print the atrous rate schedule as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("synth", help="write the synthetic blob dataset as PGM files")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one configuration")
    _add_common(p)
    p.add_argument("--describe", action="store_true", help="print the architecture and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train the six placement/attention configurations")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="metrics and ROC for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", help="continue training a checkpoint on another dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("gradcam", help="write Grad-CAM (and CID gate) heatmaps for one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, default=None, help="stage index 1..6 (default: gradcam_layer)")
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"msroi: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"msroi: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"msroi: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
