"""Command-line entry point: ``sparsecafm <command>``.

Precedence for settings is flag > JSON config > built-in default.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import scanio
from .baselines import GprConfig, bicubic_upsample, gpr_upsample
from .characterize import build_scorecard, write_scorecard_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import SparseCafmError
from .metrics import METRIC_COLUMNS, psnr, ssim
from .model import ModelConfig, predict, small_config
from .scanio import Channel, ScanPair, read_scan, write_scan
from .synthgen import GroundTruthMask, SampleSpec, generate_sample, sample_specs
from .training import TrainConfig, configure_threads, finetune, train

log = logging.getLogger("sparsecafm")


def _fail(msg: str, code: int = 1):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    """Sparse C-AFM reconstruction toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# generate


@main.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="SampleSpec JSON")
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def generate(spec_path, count, out_dir, seed):
    """Write COUNT synthetic scan pairs plus ground-truth masks and a manifest."""
    try:
        spec = SampleSpec.load(spec_path) if spec_path else SampleSpec()
    except (OSError, ValueError, TypeError) as exc:
        _fail(f"invalid spec: {exc}")
    if count < 0:
        _fail("--count must be non-negative")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(f"cannot create {out}: {exc}")
    entries = []
    for i, s in enumerate(sample_specs(spec, count, seed)):
        pair, mask = generate_sample(s)
        sid = f"sample_{i:04d}"
        files = {
            "morphology": f"{sid}_morphology.scaf",
            "current": f"{sid}_current.scaf",
            "mask": f"{sid}_mask.npy",
        }
        write_scan(pair.morphology.replace(sample_id=sid), out / files["morphology"])
        write_scan(pair.current.replace(sample_id=sid), out / files["current"])
        np.save(out / files["mask"], mask.pack())
        entries.append({
            "sample_id": sid,
            "rng_seed": s.rng_seed,
            "files": files,
            "sha256": {k: _sha256(out / v) for k, v in files.items()},
        })
    manifest = {
        "spec": json.loads(spec.to_json()),
        "spec_sha256": hashlib.sha256(spec.to_json().encode()).hexdigest(),
        "seed": seed,
        "count": count,
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {count} samples to {out}")


def load_dataset(data_dir) -> list[ScanPair]:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    pairs = []
    for e in manifest["samples"]:
        m = read_scan(d / e["files"]["morphology"])
        c = read_scan(d / e["files"]["current"])
        pairs.append(ScanPair(m, c, e["sample_id"]))
    return pairs


def load_mask(data_dir, sample_id: str) -> GroundTruthMask:
    return GroundTruthMask.unpack(np.load(Path(data_dir) / f"{sample_id}_mask.npy"))


# ---------------------------------------------------------------------------
# train / finetune


def _train_config(config_path, sigma, profile, overrides: dict) -> tuple[TrainConfig, ModelConfig | None]:
    raw = json.loads(Path(config_path).read_text()) if config_path else {}
    model_raw = raw.pop("model", None)
    if sigma is not None:
        raw["sigma"] = sigma
    raw.update({k: v for k, v in overrides.items() if v is not None})
    s = raw.setdefault("sigma", 4)
    cfg = TrainConfig.small(**raw) if profile == "small" else TrainConfig.from_dict(raw)
    if model_raw is not None:
        mcfg = ModelConfig.from_dict({"sigma": s, **model_raw})
    else:
        mcfg = small_config(s) if profile == "small" else ModelConfig(sigma=s)
    return cfg, mcfg


_train_options = [
    click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True),
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
    click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="final checkpoint path"),
    click.option("--sigma", type=click.Choice(["2", "4", "8"]), default=None),
    click.option("--profile", type=click.Choice(["small", "paper"]), default="small", show_default=True),
    click.option("--epochs", type=int, default=None),
    click.option("--steps-per-epoch", type=int, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--channel", type=click.Choice(["current", "morphology"]), default=None),
    click.option("--dry-run", is_flag=True, help="validate inputs and config, then exit"),
]


def _with_train_options(fn):
    for opt in reversed(_train_options):
        fn = opt(fn)
    return fn


def _run_training(data_dir, config_path, out_path, sigma, profile, epochs, steps_per_epoch, seed, channel, dry_run, base=None, resume=None):
    overrides = {"epochs": epochs, "steps_per_epoch": steps_per_epoch, "seed": seed, "channel": channel}
    try:
        cfg, mcfg = _train_config(config_path, int(sigma) if sigma else None, profile, overrides)
        data = load_dataset(data_dir)
    except (OSError, ValueError, TypeError, KeyError, SparseCafmError) as exc:
        _fail(f"invalid configuration or data: {exc}")
    log.info("train config: %s", cfg.to_dict())
    if dry_run:
        click.echo(json.dumps({"train": cfg.to_dict(), "model": mcfg.to_dict(), "samples": len(data)}, sort_keys=True))
        return
    out = Path(out_path)
    run_dir = out.with_suffix("")
    run_dir = run_dir.parent / (run_dir.name + "_run")
    t0 = time.perf_counter()
    try:
        if base is not None:
            ckpt = finetune(load_checkpoint(base), data, cfg, out_dir=run_dir)
        else:
            ckpt = train(data, cfg, model_config=mcfg, out_dir=run_dir, resume=load_checkpoint(resume) if resume else None)
    except SparseCafmError as exc:
        _fail(str(exc), 2)
    save_checkpoint(ckpt, out)
    click.echo(f"saved {out} (id {ckpt.id}) after {time.perf_counter() - t0:.1f}s")


@main.command("train")
@_with_train_options
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
def train_cmd(resume, **kw):
    """Train an upsampler on a generated dataset."""
    _run_training(**kw, resume=resume)


@main.command("finetune")
@_with_train_options
@click.option("--base", type=click.Path(exists=True, dir_okay=False), required=True)
def finetune_cmd(base, **kw):
    """Fine-tune an existing checkpoint on a small new dataset."""
    _run_training(**kw, base=base)


# ---------------------------------------------------------------------------
# subsample / reconstruct


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--sigma", type=click.Choice(["2", "4", "8"]), required=True)
@click.option("--channel", type=click.Choice(["current", "morphology"]), default="current", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def subsample(data_dir, sigma, channel, out_dir):
    """Simulate sparse acquisition: strided subsampling of one channel of a dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    try:
        for pair in load_dataset(data_dir):
            write_scan(scanio.downsample(pair[channel], int(sigma)), out / f"{pair.sample_id}_{channel}.scaf")
            n += 1
    except (OSError, KeyError, SparseCafmError) as exc:
        _fail(f"cannot subsample {data_dir}: {exc}")
    click.echo(f"wrote {n} sparse x{sigma} {channel} maps to {out}")


def reconstruct_field(sparse: scanio.ScanField, method: str, sigma: int, ckpt=None, gpr_config=None, gpr_tiled=None):
    """Raw sparse field -> raw full-resolution field."""
    x = scanio.normalize(sparse) if sparse.norm_state is scanio.NormState.RAW else sparse
    if method == "model":
        if ckpt.config.sigma != sigma:
            raise SparseCafmError(f"checkpoint is for sigma={ckpt.config.sigma}, not {sigma}")
        y = predict(ckpt.to_model(), x)
    elif method == "bicubic":
        y = bicubic_upsample(x, sigma)
    elif method == "gpr":
        y = gpr_upsample(x, sigma, gpr_config, tiled=gpr_tiled)
    else:
        raise SparseCafmError(f"unknown method {method!r}")
    return scanio.denormalize(y)


@main.command()
@click.option("--in", "in_path", type=click.Path(exists=True), required=True, help="sparse SCAF file or directory")
@click.option("--method", type=click.Choice(["model", "bicubic", "gpr"]), default="model", show_default=True)
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False))
@click.option("--sigma", type=click.Choice(["2", "4", "8"]), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--gpr-config", type=click.Path(exists=True, dir_okay=False))
@click.option("--gpr-tiles/--no-gpr-tiles", default=None, help="force GPR tiling on/off (default: auto)")
@click.option("--threads", type=int, default=None)
def reconstruct(in_path, method, ckpt, sigma, out_path, gpr_config, gpr_tiles, threads):
    """Reconstruct full-resolution scans from sparse SCAF files.

    ``--in`` may be a single file (``--out`` is then a file) or a directory
    (``--out`` is then a directory receiving files of the same names).
    """
    sigma = int(sigma)
    configure_threads(threads, deterministic=True)
    if method == "model" and not ckpt:
        _fail("--ckpt is required for --method model")
    src = Path(in_path)
    if src.is_dir():
        jobs = [(p, Path(out_path) / p.name) for p in sorted(src.glob("*.scaf"))]
        if not jobs:
            _fail(f"no .scaf files in {src}")
        Path(out_path).mkdir(parents=True, exist_ok=True)
    else:
        jobs = [(src, Path(out_path))]
    try:
        gcfg = GprConfig.from_dict(json.loads(Path(gpr_config).read_text())) if gpr_config else None
        model_ckpt = load_checkpoint(ckpt) if ckpt else None
    except (OSError, ValueError, TypeError, SparseCafmError) as exc:
        _fail(f"invalid configuration: {exc}")
    for src_file, dst in jobs:
        t0 = time.perf_counter()
        try:
            sparse = read_scan(src_file)
            out = reconstruct_field(sparse, method, sigma, model_ckpt, gcfg, gpr_tiles)
        except SparseCafmError as exc:
            _fail(f"{type(exc).__name__}: {exc}", 2)
        write_scan(out, dst)
        dt = time.perf_counter() - t0
        log.warning("reconstructed %s -> %s with %s in %.2fs", sparse.shape, out.shape, method, dt)
        click.echo(f"{method} x{sigma}: {src_file.name} {sparse.shape} -> {out.shape} in {dt:.2f}s")


# ---------------------------------------------------------------------------
# evaluate / scorecard


def _pair_files(a_dir, b_dir, channel: str | None = None) -> list[tuple[Path, Path]]:
    """Pair SCAF files by name; ``channel`` restricts both sides to ``*_<channel>.scaf``."""
    pattern = f"*_{channel}.scaf" if channel else "*.scaf"
    a = {p.name: p for p in sorted(Path(a_dir).glob(pattern))}
    b = {p.name: p for p in sorted(Path(b_dir).glob(pattern))}
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        _fail(f"unpaired files: only in {a_dir}: {only_a}; only in {b_dir}: {only_b}")
    if not a:
        _fail(f"no .scaf files in {a_dir}")
    return [(a[k], b[k]) for k in sorted(a)]


def metric_row(pred, truth, method: str, sigma: int) -> dict:
    """Metrics on the truth's normalized frame (data range 1)."""
    t = scanio.normalize(truth)
    p = scanio.normalize_like(pred, t)
    return {
        "sample_id": truth.sample_id,
        "method": method,
        "sigma": sigma,
        "channel": truth.channel.value,
        "psnr_db": psnr(p, t, 1.0),
        "ssim": ssim(p, t, 1.0),
    }


@main.command()
@click.option("--pred", "pred_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--truth", "truth_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--method", default="model", show_default=True)
@click.option("--sigma", type=int, default=0, help="recorded in the CSV")
@click.option("--channel", type=click.Choice(["current", "morphology", "all"]), default="current", show_default=True)
def evaluate(pred_dir, truth_dir, out_path, method, sigma, channel):
    """PSNR/SSIM of predictions against full-resolution truth."""
    rows = []
    for p, t in _pair_files(pred_dir, truth_dir, None if channel == "all" else channel):
        pred, truth = read_scan(p), read_scan(t)
        if pred.shape != truth.shape:
            _fail(f"{p.name}: prediction {pred.shape} vs truth {truth.shape}")
        rows.append(metric_row(pred, truth, method, sigma))
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "psnr_db": "inf" if math.isinf(r["psnr_db"]) else repr(r["psnr_db"]), "ssim": repr(r["ssim"])})
    click.echo(f"wrote {len(rows)} rows to {out_path}")


@main.command()
@click.option("--pred", "pred_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--sparse", "sparse_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--truth", "truth_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_prefix", type=click.Path(dir_okay=False), required=True, help="writes <out>.json and <out>.csv")
@click.option("--baseline-upsampling", type=click.Choice(["nearest", "bicubic"]), default="nearest", show_default=True)
def scorecard(pred_dir, sparse_dir, truth_dir, out_prefix, baseline_upsampling):
    """Relative MAE of extracted current-map properties: predictions and sparse baseline vs truth."""
    pairs = _pair_files(pred_dir, truth_dir, "current")
    sparse_pairs = _pair_files(sparse_dir, truth_dir, "current")
    truths = [read_scan(t) for _, t in pairs]
    preds = [read_scan(p) for p, _ in pairs]
    sparse = [read_scan(s) for s, _ in sparse_pairs]
    try:
        card = build_scorecard(truths, preds, sparse, baseline_upsampling=baseline_upsampling)
    except SparseCafmError as exc:
        _fail(str(exc))
    prefix = Path(out_prefix)
    card.to_json(prefix.with_suffix(".json"))
    write_scorecard_csv([card], prefix.with_suffix(".csv"))
    click.echo(f"scorecard x{card.sigma} over {card.n_samples} samples -> {prefix}.json/.csv")


# ---------------------------------------------------------------------------
# plot


@main.command()
@click.option("--in", "in_paths", type=click.Path(), multiple=True, required=True, help="SCAF files (one panel each) or a metrics CSV")
@click.option("--title", "titles", multiple=True, help="panel titles, in order")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--cmap", default="viridis", show_default=True)
def plot(in_paths, titles, out_path, cmap):
    """Render scan panels side by side, or bar charts of a metrics CSV."""
    from . import plotting

    missing = [p for p in in_paths if not Path(p).exists()]
    if missing:
        _fail(f"missing input: {missing}")
    try:
        if len(in_paths) == 1 and in_paths[0].endswith(".csv"):
            plotting.metrics_bars(in_paths[0], out_path)
        else:
            fields = [read_scan(p) for p in in_paths]
            plotting.panels(fields, out_path, titles=list(titles) or [Path(p).stem for p in in_paths], cmap=cmap)
    except (SparseCafmError, ValueError, KeyError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
