"""Run the six-row placement/attention ablation and print a comparison table.

Thin wrapper over ``msroi ablate`` that adds parameter counts and pretty
prints the resulting CSV.

    python3 scripts/run_ablation.py --epochs 5 --out runs/ablation
"""

import argparse
import csv
import sys
from pathlib import Path

from msroi.cli import main as cli_main
from msroi.config import RunConfig
from msroi.model import ablation_matrix, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=300)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    code = cli_main(["ablate", "--synth", "--epochs", str(args.epochs), "--seed", str(args.seed),
                     "--synth-per-class", str(args.per_class), "--jobs", str(args.jobs), "--out", args.out])
    rows = list(csv.DictReader(open(Path(args.out) / "ablation.csv")))
    cfg = RunConfig()
    counts = [build_model(cfg.backbone(), ab).parameter_count() for ab in ablation_matrix()]

    print()
    print(f"{'row':>3}  {'stage4':^6} {'stage5':^6} {'stage6':^6} {'cid':^7} {'params':>9}  "
          f"{'acc':>6} {'f1':>6} {'auc':>6}")
    for r, n in zip(rows, counts):
        fmt = lambda k: f"{float(r[k]):6.3f}" if r[k] else "   n/a"
        print(f"{r['row']:>3}  {r['stage4']:^6} {r['stage5']:^6} {r['stage6']:^6} {r['cid']:^7} {n:>9}  "
              f"{fmt('accuracy')} {fmt('f1')} {fmt('auc')}")
    return code


if __name__ == "__main__":
    sys.exit(main())
