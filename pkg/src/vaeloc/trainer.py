"""Training loop, checkpoints and loss-history CSV."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import losses
from .data import AugmentConfig, augment
from .errors import CheckpointError, ConfigurationError, DataError, NumericalError
from .model import VAE, ImageBatch, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOSS_CSV_COLUMNS = ("epoch", "rec_nll", "kl", "total", "beta")


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    beta: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> only the final checkpoint
    augment: Optional[AugmentConfig] = None
    # epoch -> learning-rate multiplier; None keeps the rate constant
    lr_schedule: Optional[Callable[[int], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "lr_schedule"}
        d["adam_betas"] = list(self.adam_betas)
        d["lr_schedule"] = None if self.lr_schedule is None else getattr(self.lr_schedule, "__name__", "custom")
        return d


@dataclass
class TrainResult:
    model: VAE
    history: list
    checkpoint_path: Optional[Path] = None


def fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def train(model_cfg: ModelConfig, dataset: ImageBatch, cfg: TrainConfig,
          out_dir=None, model: Optional[VAE] = None) -> TrainResult:
    """Fit a (beta-)VAE on normal images only.

    Writes ``model.pt`` and ``loss_history.csv`` into ``out_dir`` when given.
    A non-finite loss aborts training; whatever checkpoint was last written
    stays on disk untouched.
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    if dataset.image_size != model_cfg.image_size:
        raise ConfigurationError(
            f"dataset image size {dataset.image_size} != model image_size {model_cfg.image_size}")

    model = model if model is not None else VAE(model_cfg, seed=cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=cfg.adam_betas, eps=cfg.adam_eps)
    gen = torch.Generator().manual_seed(cfg.seed)
    aug_rng = np.random.default_rng(cfg.augment.seed if cfg.augment else cfg.seed)
    data = dataset.data
    n = len(dataset)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.pt" if out_dir is not None else None
    meta = {"train_config": cfg.to_dict(), "n_images": n,
            "normalization_stats": list(dataset.normalization_stats)}

    history = []
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_schedule is not None:
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * cfg.lr_schedule(epoch)
        order = torch.randperm(n, generator=gen).numpy()
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = data[idx]
            if cfg.augment is not None and not cfg.augment.is_identity:
                xb = np.stack([augment(im, cfg.augment, aug_rng) for im in xb])
            x = torch.as_tensor(xb, dtype=torch.float32)
            out = model(x, mode="sample", generator=gen)
            last_good = ckpt_path if ckpt_path is not None and ckpt_path.exists() else "none"
            try:
                loss = losses.beta_elbo_loss(x, out, cfg.beta)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}; last good checkpoint: {last_good}") from exc
            if not torch.isfinite(loss.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}; last good checkpoint: {last_good}")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            sums += len(idx) * np.array([loss.rec_nll.item(), loss.kl.item(), loss.total.item()])
        rec, kl, total = sums / n
        history.append({"epoch": epoch, "rec_nll": rec, "kl": kl, "total": total, "beta": cfg.beta})
        log.info("epoch %d rec %.4f kl %.4f total %.4f", epoch, rec, kl, total)
        if ckpt_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_path, model, dataset.normalization_stats, meta)

    model.eval()
    if out_dir is not None:
        save_checkpoint(ckpt_path, model, dataset.normalization_stats, meta)
        write_loss_csv(out_dir / "loss_history.csv", history)
    return TrainResult(model=model, history=history, checkpoint_path=ckpt_path)


def write_loss_csv(path, history) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_CSV_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in LOSS_CSV_COLUMNS})
    return path


def save_checkpoint(path, model: VAE, normalization_stats, meta: Optional[dict] = None) -> Path:
    meta = dict(meta or {})
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "normalization_stats": [float(v) for v in normalization_stats],
        "train_config": meta.get("train_config", {}),
        "train_fingerprint": fingerprint(meta),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: VAE
    normalization_stats: tuple
    train_config: dict
    train_fingerprint: str


_REQUIRED = ("format_version", "model_config", "state_dict", "normalization_stats", "train_fingerprint")


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:  # noqa: BLE001 - torch raises many unrelated types on bad input
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict):
        raise CheckpointError(f"cannot parse checkpoint {path}: not a checkpoint archive")
    version = payload.get("format_version")
    if version is not None and version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})")
    for key in _REQUIRED:
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing field '{key}'")
    try:
        model = VAE(ModelConfig(**payload["model_config"]))
        model.load_state_dict(payload["state_dict"])
    except (TypeError, RuntimeError, ConfigurationError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its model config: {exc}") from None
    model.eval()
    return Checkpoint(model=model, normalization_stats=tuple(payload["normalization_stats"]),
                      train_config=payload.get("train_config", {}),
                      train_fingerprint=payload["train_fingerprint"])
