"""Training and fine-tuning of the sparse-scan upsampler.

Every optimizer step draws its batch from a generator seeded with
``(seed, global_step)``, so a run resumed from a checkpoint replays the
exact batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import scanio
from .checkpoint import Checkpoint, restore_adam, save_checkpoint
from .errors import ConfigError, DimensionError, NumericError, TrainingDivergedError, ValidationError
from .metrics import psnr
from .model import ModelConfig, SparseUpsampler, build_model, small_config
from .scanio import Channel, NormState, ScanField, ScanPair

log = logging.getLogger(__name__)

_PAPER_BATCH = {2: 16, 4: 16, 8: 4}
_PAPER_CROP = {2: 256, 4: 256, 8: 384}
LOG_COLUMNS = ("epoch", "step", "train_loss", "val_loss", "val_psnr")


@dataclass
class TrainConfig:
    sigma: int = 4
    epochs: int = 200
    steps_per_epoch: int = 1024
    batch_size: int | None = None
    crop_high: int | None = None
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    seed: int = 0
    finetune_from: str | None = None
    val_fraction: float = 0.1
    channel: str = "current"
    checkpoint_every: int = 10
    lr_milestones: tuple[int, ...] = ()  # epochs after which the learning rate halves
    threads: int | None = None
    deterministic: bool = True

    def __post_init__(self):
        scanio.check_sigma(self.sigma)
        if self.batch_size is None:
            self.batch_size = _PAPER_BATCH[self.sigma]
        if self.crop_high is None:
            self.crop_high = _PAPER_CROP[self.sigma]
        Channel(self.channel)
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0; steps_per_epoch and batch_size >= 1")
        if self.crop_high < self.sigma or self.crop_high % self.sigma:
            raise ConfigError(f"crop_high={self.crop_high} must be a positive multiple of sigma={self.sigma}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if any(m < 1 for m in self.lr_milestones):
            raise ConfigError("lr_milestones must be positive epoch numbers")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    @classmethod
    def small(cls, sigma: int, **overrides) -> "TrainConfig":
        """Desk-scale CPU profile: 40 epochs x 64 steps on small crops, step-decayed learning rate."""
        epochs = overrides.pop("epochs", 40)
        base = dict(
            sigma=sigma,
            epochs=epochs,
            steps_per_epoch=64,
            batch_size=8,
            crop_high=64 if sigma < 8 else 128,
            learning_rate=1e-3,
            lr_milestones=tuple(int(epochs * f) for f in (0.5, 0.75, 0.9) if int(epochs * f) > 0),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` (halved at every milestone passed)."""
        return self.learning_rate * 0.5 ** sum(epoch >= m for m in self.lr_milestones)


def l1_loss(pred: ScanField, target: ScanField) -> float:
    """Mean absolute pixel difference."""
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.data.astype(np.float64) - target.data.astype(np.float64))))


def configure_threads(threads: int | None = None, deterministic: bool = True) -> int:
    """Cap torch threads (``SPARSECAFM_THREADS`` overrides when ``threads`` is None)."""
    if threads is None:
        env = os.environ.get("SPARSECAFM_THREADS")
        threads = int(env) if env else (1 if deterministic else torch.get_num_threads())
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(deterministic)
    return threads


def prepare_fields(data: Sequence[ScanPair], channel: str) -> list[ScanField]:
    """Select one channel of every pair and min-max normalize it."""
    out = []
    for pair in data:
        f = pair[channel]
        out.append(f if f.norm_state is NormState.NORMALIZED else scanio.normalize(f))
    return out


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if n < 2:
        return list(range(n)), []
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    order = np.random.default_rng([seed, 7919]).permutation(n)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def sample_batch(fields: Sequence[ScanField], cfg: TrainConfig, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(low, high) tensors of shape (B, 1, crop/sigma, crop/sigma) and (B, 1, crop, crop).

    Each item is crop -> dihedral augment -> strided subsample.
    """
    rng = np.random.default_rng([cfg.seed, step])
    s = cfg.sigma
    lows, highs = [], []
    for _ in range(cfg.batch_size):
        high = fields[int(rng.integers(len(fields)))]
        low = scanio.downsample(high, s)
        _, hc = scanio.random_crop_pair(low, high, cfg.crop_high, rng)
        hc = scanio.dihedral(hc.data, int(rng.integers(8)))
        highs.append(hc)
        lows.append(scanio.subsample(hc, s))
    low_t = torch.from_numpy(np.stack(lows)[:, None].astype(np.float32))
    high_t = torch.from_numpy(np.stack(highs)[:, None].astype(np.float32))
    return low_t, high_t


@torch.no_grad()
def validate(model: SparseUpsampler, fields: Sequence[ScanField]) -> tuple[float, float]:
    """Mean full-frame L1 and PSNR (data range 1) over normalized fields."""
    if not fields:
        return math.nan, math.nan
    model.eval()
    losses, scores = [], []
    s = model.cfg.sigma
    for f in fields:
        x = torch.from_numpy(np.array(scanio.subsample(f.data, s)))[None, None]
        y = model(x).clamp(0, 1)[0, 0].numpy()
        pred = f.replace(data=y)
        losses.append(l1_loss(pred, f))
        scores.append(psnr(pred, f, 1.0))
    model.train()
    return float(np.mean(losses)), float(np.mean(scores))


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOG_COLUMNS})


def train(
    data: Sequence[ScanPair],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    out_dir=None,
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Run the optimization loop and return the final checkpoint.

    ``init`` seeds parameters only (fine-tuning); ``resume`` also restores
    the optimizer moments and the epoch/step counters.
    """
    if not data:
        raise ValidationError("training data is empty")
    configure_threads(config.threads, config.deterministic)
    start = resume or init
    if start is not None:
        model_config = start.config
    model_config = model_config or small_config(config.sigma)
    if model_config.sigma != config.sigma:
        raise ConfigError(f"model sigma {model_config.sigma} != train sigma {config.sigma}")

    fields = prepare_fields(data, config.channel)
    for f in fields:
        if min(f.shape) < config.crop_high:
            raise DimensionError(f"field {f.sample_id!r} {f.shape} is smaller than crop {config.crop_high}")
        scanio.check_sigma(config.sigma, f.shape)
    tr_idx, va_idx = split_train_val(len(fields), config.val_fraction, config.seed)
    train_fields = [fields[i] for i in tr_idx]
    val_fields = [fields[i] for i in va_idx]

    model = start.to_model() if start is not None else build_model(model_config, seed=config.seed)
    model.train()
    opt = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    meta: dict = {
        "epoch": 0,
        "step": 0,
        "history": [],
        "provenance": [],
        "train_config": config.to_dict(),
    }
    if resume is not None:
        meta.update(json.loads(json.dumps(resume.training_meta)))
        meta["train_config"] = config.to_dict()
        restore_adam(model, opt, resume)
    elif init is not None:
        meta["provenance"] = list(init.training_meta.get("provenance", [])) + [init.id]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def snapshot() -> Checkpoint:
        return Checkpoint.from_model(model, json.loads(json.dumps(meta)), opt)

    last_good = snapshot()
    best_psnr = max((h["val_psnr"] for h in meta["history"] if not math.isnan(h["val_psnr"])), default=-math.inf)
    step = meta["step"]
    for epoch in range(meta["epoch"], config.epochs):
        for group in opt.param_groups:
            group["lr"] = config.lr_at(epoch)
        running = 0.0
        for _ in range(config.steps_per_epoch):
            low, high = sample_batch(train_fields, config, step)
            try:
                loss = (model(low) - high).abs().mean()
                lv = float(loss.detach())
                reason = None if math.isfinite(lv) else f"non-finite loss at step {step}"
            except NumericError as exc:
                reason = f"{exc} at step {step}"
            if reason is not None:
                if out is not None:
                    save_checkpoint(last_good, out / "last_good.ckpt")
                raise TrainingDivergedError(reason, last_good=last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if step == 0:
                meta["initial_loss"] = lv
            step += 1
            running += lv
            if on_step is not None:
                on_step(step, lv)
        val_loss, val_psnr = validate(model, val_fields)
        row = {
            "epoch": epoch + 1,
            "step": step,
            "train_loss": running / config.steps_per_epoch,
            "val_loss": val_loss,
            "val_psnr": val_psnr,
        }
        meta["history"].append(row)
        meta["epoch"], meta["step"] = epoch + 1, step
        log.info("epoch %d step %d train %.5f val %.5f psnr %.3f", *row.values())
        last_good = snapshot()
        if out is not None:
            _write_log(out / "train_log.csv", meta["history"])
            if (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(last_good, out / f"epoch_{epoch + 1:04d}.ckpt")
            if math.isfinite(val_psnr) and val_psnr > best_psnr:
                best_psnr = val_psnr
                save_checkpoint(last_good, out / "best_val.ckpt")
    final = snapshot()
    if out is not None:
        save_checkpoint(final, out / "final.ckpt")
    return final


def finetune(base: Checkpoint, data: Sequence[ScanPair], config: TrainConfig, out_dir=None) -> Checkpoint:
    """Continue training ``base`` on a small new dataset with a fresh optimizer."""
    if base.config.sigma != config.sigma:
        raise ConfigError(f"base checkpoint has sigma={base.config.sigma}, config asks for sigma={config.sigma}")
    return train(data, config, out_dir=out_dir, init=base)
