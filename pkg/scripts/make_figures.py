"""Qualitative panels and metric bars from a desk experiment directory.

For each requested sample, renders sparse | bicubic | model | original at
every sigma with a checkpoint in ``<run>/models``.

Usage::

    python scripts/make_figures.py --run runs/desk --samples 0 1
"""

from __future__ import annotations

import argparse
from pathlib import Path

from sparsecafm import plotting, scanio
from sparsecafm.baselines import bicubic_upsample
from sparsecafm.checkpoint import load_checkpoint
from sparsecafm.model import predict
from sparsecafm.synthgen import SampleSpec, generate_sample, sample_specs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--run", type=Path, default=Path("runs/desk"))
    ap.add_argument("--samples", type=int, nargs="+", default=[0])
    ap.add_argument("--seed", type=int, default=0, help="seed the experiment used")
    ap.add_argument("--cmap", default="viridis")
    args = ap.parse_args()

    base = SampleSpec.load(args.run / "spec.json")
    specs = sample_specs(base, max(args.samples) + 1, seed=args.seed + 1000)
    fig_dir = args.run / "figures"
    fig_dir.mkdir(exist_ok=True)
    for ck_path in sorted((args.run / "models").glob("x*.ckpt")):
        ckpt = load_checkpoint(ck_path)
        s = ckpt.config.sigma
        model = ckpt.to_model()
        for i in args.samples:
            truth = generate_sample(specs[i])[0].current
            lo = scanio.downsample(truth, s)
            x = scanio.normalize(lo)
            fields = [
                scanio.nearest_upsample(lo, s),
                scanio.denormalize(bicubic_upsample(x, s)),
                scanio.denormalize(predict(model, x)),
                truth,
            ]
            titles = [f"sparse x{s}", "bicubic", "model", "original"]
            plotting.panels(fields, fig_dir / f"sample{i}_x{s}.png", titles, args.cmap)
    if (args.run / "metrics.csv").exists():
        plotting.metrics_bars(args.run / "metrics.csv", fig_dir / "metrics.png")
    print(f"figures in {fig_dir}")


if __name__ == "__main__":
    main()
