"""Reference run for the end-to-end toy criterion.

Trains the toy preset with and without DTA on toy_splits(0, 400, 100) using
HyperParams.toy(), evaluating on the comics validation split after every
epoch. Curves land in <out>/{mtl,dta}/epochs.jsonl, a summary in
<out>/summary.json.

    python scripts/reference_run.py --out runs/reference
"""

import argparse
import json
import time
from pathlib import Path

from comicmtl.config import ModelConfig
from comicmtl.data import toy_splits
from comicmtl.metrics import evaluate
from comicmtl.training import HyperParams, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", choices=["mtl", "dta"])
    args = ap.parse_args()

    out = Path(args.out)
    splits = toy_splits(args.seed, 400, 100)
    hyper = HyperParams.toy()
    summary = {"hyper": hyper.__dict__, "runs": {}}
    for dta in (False, True):
        tag = "dta" if dta else "mtl"
        if args.only and args.only != tag:
            continue
        t0 = time.time()

        def on_epoch(epoch, model):
            rep = evaluate(model, splits.val_comics)
            print(f"{tag} epoch {epoch:2d}  {time.time() - t0:6.0f}s  "
                  f"mIoU {rep.miou_percent:6.2f}  RMSE {rep.rmse:.4f}", flush=True)
            return rep.as_dict()

        res = train_loop(splits.train_real, ModelConfig.toy(dta_enabled=dta), hyper,
                         splits.train_comics, out_dir=out / tag, on_epoch=on_epoch)
        final = evaluate(res.model, splits.val_comics).as_dict()
        summary["runs"][tag] = {**final, "seconds": round(time.time() - t0, 1)}

    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary["runs"], indent=2))


if __name__ == "__main__":
    main()
