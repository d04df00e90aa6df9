"""Two-row ablation table (MTL vs MTL+DTA) from two checkpoints.

    python scripts/ablation_table.py runs/reference/mtl/final.pfck runs/reference/dta/final.pfck

Evaluates both on the synthetic comics validation split and prints a small
table. No row is expected to win; on synthetic data the margin means little.
"""

import sys

from comicmtl.data import toy_splits
from comicmtl.metrics import evaluate
from comicmtl.training import load_model


def main(paths):
    if len(paths) != 2:
        sys.exit("usage: ablation_table.py MTL_CKPT DTA_CKPT")
    val = toy_splits(0, 0, 100).val_comics
    print(f"{'method':10s} {'mIoU %':>8s} {'RMSE':>8s}")
    for p in paths:
        model = load_model(p)
        rep = evaluate(model, val)
        print(f"{rep.method:10s} {rep.miou_percent:8.2f} {rep.rmse:8.4f}")


if __name__ == "__main__":
    main(sys.argv[1:])
