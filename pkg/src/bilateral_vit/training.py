"""Losses, learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .network.model import read_checkpoint, save_checkpoint
from .types import ConfigError

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


def _check_shapes(logits, target):
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")


def dice_loss(logits, target, smooth: float = DICE_SMOOTH):
    """Soft dice loss per sample, averaged over the batch (first) dimension."""
    _check_shapes(logits, target)
    p = torch.sigmoid(logits).flatten(1)
    t = target.to(p.dtype).flatten(1)
    inter = (p * t).sum(dim=1)
    dice = (2.0 * inter + smooth) / (p.sum(dim=1) + t.sum(dim=1) + smooth)
    return (1.0 - dice).mean()


def bce_loss(logits, target):
    """Mean binary cross-entropy on logits (stable softplus form)."""
    _check_shapes(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def combined_loss(logits, target):
    return dice_loss(logits, target) + bce_loss(logits, target)


def lr_at(epoch: float, total_epochs: int = 200, lr0: float = 1e-3, lr_min: float = 1e-7) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to ``lr_min`` at ``total_epochs``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr0: float = 1e-3
    lr_min: float = 1e-7
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    # Schedule horizon; defaults to ``epochs``.
    schedule_epochs: Optional[int] = None

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.schedule_epochs is not None and self.schedule_epochs < self.epochs - 1:
            raise ConfigError("schedule_epochs must cover every training epoch")
        self.betas = tuple(self.betas)

    @property
    def horizon(self) -> int:
        return self.schedule_epochs or self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    last_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    iterations: int = 0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss"]


def set_deterministic(seed: int, enabled: bool = True):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)


def collate(items: Sequence[dict]) -> dict:
    batch = {}
    for key in items[0]:
        vals = [it[key] for it in items]
        batch[key] = torch.stack(vals) if isinstance(vals[0], torch.Tensor) else vals
    return batch


def forward_batch(model, batch):
    vessel = batch.get("vessel") if model.config.variant.needs_vessel_map else None
    return model(batch["image"], vessel)


@torch.no_grad()
def evaluate_loss(model, dataset, batch_size: int = 2) -> float:
    """Mean combined loss over ``dataset`` in eval mode."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        batch = collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])
        logits = forward_batch(model, batch)
        n = logits.shape[0]
        total += combined_loss(logits, batch["target"]).item() * n
        count += n
    model.train(was_training)
    return total / count


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model, dataset, config: TrainConfig, out_dir=None, val_dataset=None, resume: bool = False,
          extra_checkpoint: Optional[dict] = None) -> TrainResult:
    """Adam + per-epoch cosine schedule on ``combined_loss``.

    ``dataset`` is an indexable of dicts holding ``image``, ``target`` and,
    for vessel variants, ``vessel`` tensors. If it has ``set_epoch`` it is
    told the epoch before each pass (used for seeded augmentation).
    Writes ``last.pt``, ``best.pt`` and ``metrics.jsonl`` under ``out_dir``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    set_deterministic(config.seed, config.deterministic)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr0, betas=config.betas,
                                 eps=config.adam_eps, weight_decay=0.0)
    result = TrainResult()
    start_epoch = 0
    best = math.inf
    if resume:
        if out is None or not (out / "last.pt").is_file():
            raise FileNotFoundError(f"nothing to resume in {out}")
        payload = read_checkpoint(out / "last.pt")
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"] + 1
        best = payload.get("best_loss", math.inf)
        result.history = list(payload.get("history", []))
        result.iterations = payload.get("iterations", 0)
        torch.set_rng_state(payload["torch_rng"])
        logger.info("resumed from epoch %d", payload["epoch"])
    elif out is not None:
        (out / "metrics.jsonl").write_text("")

    extra = dict(extra_checkpoint or {})
    model.train()
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, config.horizon, config.lr0, config.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if hasattr(dataset, "set_epoch"):
            dataset.set_epoch(epoch)
        order = _epoch_order(config.seed, epoch, len(dataset))
        running, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = collate([dataset[int(i)] for i in idx])
            logits = forward_batch(model, batch)
            loss = combined_loss(logits, batch["target"])
            if not torch.isfinite(loss):
                _dump_divergence(out, epoch, result.iterations, lr, loss, batch)
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, iteration {result.iterations}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            running += loss.item() * len(idx)
            seen += len(idx)
            result.iterations += 1

        record = {"epoch": epoch, "lr": lr, "train_loss": running / seen}
        if val_dataset is not None and len(val_dataset):
            record["val_loss"] = evaluate_loss(model, val_dataset, config.batch_size)
        result.history.append(record)
        logger.info("epoch %d lr %.3g loss %.4f", epoch, lr, record["train_loss"])
        if out is None:
            continue
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")
        score = record.get("val_loss", record["train_loss"])
        state = dict(
            extra,
            optimizer=optimizer.state_dict(),
            epoch=epoch,
            train_config=config.to_dict(),
            history=result.history,
            iterations=result.iterations,
            torch_rng=torch.get_rng_state(),
        )
        if score < best:
            best = score
            result.best_checkpoint = save_checkpoint(out / "best.pt", model, best_loss=best, **state)
        result.last_checkpoint = save_checkpoint(out / "last.pt", model, best_loss=best, **state)
    if out is not None:
        result.last_checkpoint = out / "last.pt"
        result.best_checkpoint = out / "best.pt" if (out / "best.pt").exists() else None
    model.eval()
    return result


def _dump_divergence(out, epoch, iteration, lr, loss, batch):
    if out is None:
        return
    state = {
        "epoch": epoch,
        "iteration": iteration,
        "lr": lr,
        "loss": float(loss.item()),
        "batch_ids": batch.get("id"),
        "image_finite": bool(torch.isfinite(batch["image"]).all()),
        "target_sum": float(batch["target"].sum()),
    }
    (out / "diverged.json").write_text(json.dumps(state, indent=2))
