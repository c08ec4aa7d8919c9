"""Desk-scale reproduction of the reconstruction study on synthetic scans.

Generates a synthetic training set and a held-out set, trains one small
model per sparsity factor, then writes

- ``metrics.csv``: per-sample PSNR/SSIM for model, bicubic and (optionally) GPR
- ``scorecard.csv`` / ``scorecard_x{s}.json``: property rMAE, model vs sparse baseline
- ``models/x{s}.ckpt`` with its training log

Usage::

    python scripts/desk_experiment.py --out runs/desk --sigmas 2 4 --epochs 40
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from sparsecafm import scanio
from sparsecafm.baselines import bicubic_upsample, gpr_upsample
from sparsecafm.characterize import build_scorecard, write_scorecard_csv
from sparsecafm.checkpoint import save_checkpoint
from sparsecafm.errors import ResourceError
from sparsecafm.cli import metric_row
from sparsecafm.metrics import METRIC_COLUMNS
from sparsecafm.model import predict
from sparsecafm.synthgen import SampleSpec, generate_sample, sample_specs
from sparsecafm.training import TrainConfig, configure_threads, train

log = logging.getLogger("desk")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--sigmas", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--grid", type=int, default=128)
    ap.add_argument("--train", type=int, default=50)
    ap.add_argument("--test", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gpr", action="store_true", help="also run the GPR baseline (slow at x2)")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    configure_threads(args.threads)

    out = args.out
    (out / "models").mkdir(parents=True, exist_ok=True)
    base = SampleSpec(grid_size=args.grid)
    train_set = [generate_sample(s)[0] for s in sample_specs(base, args.train, seed=args.seed)]
    test_set = [generate_sample(s)[0] for s in sample_specs(base, args.test, seed=args.seed + 1000)]
    (out / "spec.json").write_text(base.to_json())

    rows, cards, timing = [], [], {}
    for s in args.sigmas:
        cfg = TrainConfig.small(s, epochs=args.epochs, seed=args.seed)
        t0 = time.perf_counter()
        ckpt = train(train_set, cfg, out_dir=out / "models" / f"x{s}_run")
        timing[f"train_x{s}_s"] = time.perf_counter() - t0
        save_checkpoint(ckpt, out / "models" / f"x{s}.ckpt")
        model = ckpt.to_model()

        truths, preds, sparse = [], [], []
        for pair in test_set:
            truth = pair.current
            lo = scanio.downsample(truth, s)
            x = scanio.normalize(lo)
            methods = {
                "model": scanio.denormalize(predict(model, x)),
                "bicubic": scanio.denormalize(bicubic_upsample(x, s)),
            }
            if args.gpr:
                try:
                    methods["gpr"] = scanio.denormalize(gpr_upsample(x, s))
                except ResourceError as exc:
                    log.info("gpr x%d skipped: %s", s, exc)
            rows += [metric_row(pred, truth, name, s) for name, pred in methods.items()]
            truths.append(truth)
            preds.append(methods["model"])
            sparse.append(lo)
        card = build_scorecard(truths, preds, sparse)
        card.to_json(out / f"scorecard_x{s}.json")
        cards.append(card)
        for name in ("model", "bicubic", "gpr"):
            sel = [r for r in rows if r["sigma"] == s and r["method"] == name]
            if sel:
                log.info(
                    "x%d %-8s psnr %.2f ssim %.4f", s, name,
                    np.mean([r["psnr_db"] for r in sel]), np.mean([r["ssim"] for r in sel]),
                )

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_scorecard_csv(cards, out / "scorecard.csv")
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    log.info("results in %s", out)


if __name__ == "__main__":
    main()
