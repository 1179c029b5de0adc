"""Training loop: random paired crops, 90-degree rotation augmentation,
L1 objective, adaptive-moment optimizer under a cosine-annealed learning
rate. Fully reproducible given a seed: data order, augmentation, and
weight init all derive from it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, TrainingHalted
from .haze import read_manifest
from .image import load_image


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 2048
    batch_size: int = 2
    epochs: int = 500
    steps_per_epoch: int | None = None   # None: one pass over the train pairs
    lr_init: float = 0.001
    lr_min: float = 0.0
    rotate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be > 0, got {self.lr_init}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise DataError(f"shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init down to lr_min over total_steps."""
    if total_steps <= 0:
        return cfg.lr_min
    step = min(max(step, 0), total_steps)
    cos = math.cos(math.pi * step / total_steps)
    return cfg.lr_min + (cfg.lr_init - cfg.lr_min) / 2.0 * (1.0 + cos)


@dataclass
class TrainResult:
    last_checkpoint: str
    best_checkpoint: str
    history: list[dict] = field(default_factory=list)

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss"])
            for row in self.history:
                writer.writerow([row["step"], row["lr"], row["loss"]])


def _load_train_pairs(manifest_path, crop_size: int):
    records = [r for r in read_manifest(manifest_path) if r.get("split", "train") == "train"]
    if not records:
        raise DataError(f"manifest {manifest_path} has no training pairs")
    pairs = []
    for rec in records:
        hazy = load_image(rec["hazy"]).data
        clear = load_image(rec["clear"]).data
        if hazy.shape != clear.shape:
            raise DataError(f"pair {rec['hazy']} / {rec['clear']} shapes differ")
        if hazy.shape[0] < crop_size or hazy.shape[1] < crop_size:
            raise DataError(
                f"image {rec['hazy']} is smaller than the {crop_size}px training crop")
        pairs.append((hazy, clear))
    return pairs


def _sample_crop(pairs, rng: np.random.Generator, crop: int, rotate: bool):
    idx = int(rng.integers(len(pairs)))
    hazy, clear = pairs[idx]
    top = int(rng.integers(hazy.shape[0] - crop + 1))
    left = int(rng.integers(hazy.shape[1] - crop + 1))
    h = hazy[top : top + crop, left : left + crop]
    c = clear[top : top + crop, left : left + crop]
    if rotate:
        k = int(rng.integers(4))  # same rotation on both sides keeps the pair aligned
        h = np.rot90(h, k).copy()
        c = np.rot90(c, k).copy()
    return h, c


def train(model, manifest_path, cfg: TrainConfig, out_dir) -> TrainResult:
    """Train in place; writes best/last checkpoints and a loss-history CSV.

    Every patch mini-batch of a crop contributes to the same optimizer
    step (the full pipeline forward builds one graph), and a non-finite
    loss halts with a diagnostic snapshot instead of continuing.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.crop_size % model.patch_size != 0:
        raise ConfigError(
            f"crop_size {cfg.crop_size} must be a multiple of patch_size {model.patch_size}")

    pairs = _load_train_pairs(manifest_path, cfg.crop_size)
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(pairs) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    torch.manual_seed(cfg.seed)
    device = next(model.parameters()).device
    # lr is driven manually from the schedule; the optimizer carries the moments
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init,
                                 betas=(0.9, 0.999), eps=1e-8)

    history: list[dict] = []
    best_loss = math.inf
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    step = 0
    for epoch in range(cfg.epochs):
        for epoch_step in range(steps_per_epoch):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(epoch, epoch_step)))
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            optimizer.zero_grad()
            losses = []
            for _ in range(cfg.batch_size):
                hazy_np, clear_np = _sample_crop(pairs, rng, cfg.crop_size, cfg.rotate)
                hazy = torch.from_numpy(hazy_np).to(device)
                clear = torch.from_numpy(clear_np).to(device)
                pred = model.forward_image(hazy)
                loss = l1_loss(pred, clear) / cfg.batch_size
                loss.backward()
                losses.append(float(loss.detach()) * cfg.batch_size)
            step_loss = float(np.mean(losses))

            if not math.isfinite(step_loss):
                snapshot = out_dir / "halt_snapshot.ckpt"
                save_checkpoint(model, snapshot, metadata={"step": step, "loss": repr(step_loss)})
                raise TrainingHalted(step, step_loss, str(snapshot))

            optimizer.step()
            history.append({"step": step, "lr": lr, "loss": step_loss})
            step += 1

        epoch_loss = float(np.mean([h["loss"] for h in history[-steps_per_epoch:]]))
        save_checkpoint(model, last_path, metadata={"epoch": epoch, "step": step, "loss": epoch_loss})
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            save_checkpoint(model, best_path, metadata={"epoch": epoch, "step": step, "loss": epoch_loss})

    result = TrainResult(str(last_path), str(best_path), history)
    result.write_history_csv(out_dir / "history.csv")
    return result
