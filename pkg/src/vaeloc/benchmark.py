"""Synthetic end-to-end benchmark: train on normal images, evaluate on
images with injected disk anomalies."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

from .data import (AnomalySpec, SyntheticConfig, apply_normalization, generate_synthetic_normal,
                   inject_anomalies, normalize_dataset)
from .ensemble import SplitSpec
from .metrics import DEFAULT_LAMBDAS, EVAL_PREDICTORS, EvalReport, evaluate_dataset
from .model import ModelConfig
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    n_train: int = 2000
    n_test: int = 200
    image_size: int = 64
    texture: str = "gaussian_blobs"
    latent_dim: int = 32
    epochs: int = 30
    # shifts are in units of the training-set std (data is normalised first)
    anomaly: AnomalySpec = field(default_factory=lambda: AnomalySpec(
        shape="disk", radius_range=(6, 10), intensity_shift_range=(3.0, 5.0), seed=2))
    lambdas: tuple = DEFAULT_LAMBDAS
    labeled_fraction: float = 0.10
    seed: int = 0


def make_data(cfg: BenchmarkConfig):
    """Returns ``(train_batch, test_images, test_masks)``; the test set is
    normalised with the training statistics."""
    raw = generate_synthetic_normal(SyntheticConfig(cfg.n_train, cfg.image_size, cfg.texture, seed=cfg.seed))
    train_batch, stats = normalize_dataset(raw)
    test_raw = generate_synthetic_normal(
        SyntheticConfig(cfg.n_test, cfg.image_size, cfg.texture, seed=cfg.seed + 1))
    test, masks = inject_anomalies(apply_normalization(test_raw, stats), cfg.anomaly)
    return train_batch, test, masks


def train_model(cfg: BenchmarkConfig, train_batch, beta: float = 1.0, out_dir=None) -> TrainResult:
    mcfg = ModelConfig(image_size=cfg.image_size, latent_dim=cfg.latent_dim)
    return train(mcfg, train_batch, TrainConfig(epochs=cfg.epochs, beta=beta, seed=cfg.seed), out_dir=out_dir)


def run(cfg: Optional[BenchmarkConfig] = None, beta: float = 1.0,
        predictors=EVAL_PREDICTORS, data=None) -> tuple:
    """Train one model and evaluate it. Returns ``(report, train_result)``."""
    cfg = cfg or BenchmarkConfig()
    train_batch, test, masks = data if data is not None else make_data(cfg)
    t0 = time.time()
    result = train_model(cfg, train_batch, beta)
    log.info("trained beta=%g in %.1fs", beta, time.time() - t0)
    report: EvalReport = evaluate_dataset(
        result.model, test, masks, predictors, lambdas=cfg.lambdas,
        split=SplitSpec(cfg.labeled_fraction, seed=cfg.seed), seed=cfg.seed)
    return report, result
