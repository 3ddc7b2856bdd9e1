"""Energy-descent projection of an input onto the learned normal manifold.

The energy of an iterate ``x_t`` started from ``x_0`` is::

    E(x_t) = rec_nll(x_t, decode(encode(x_t).mu)) + lam * ||x_t - x_0||_1

and is minimised over the input with Adam. The subgradient of |.| at 0 is
taken as 0. The best-energy iterate is tracked, so the returned projection
never has higher energy than the input itself.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses
from .errors import ConfigurationError
from .model import VAE, _as_batch
from .predictors import AnomalyMap

log = logging.getLogger(__name__)

MAP_MODES = ("displacement", "reconstruction")


@dataclass
class ProjectionConfig:
    alpha: float = 0.03
    lam: float = 1.0
    max_iters: int = 100
    early_stop_patience: int = 20  # 0 disables early stopping
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    map_mode: str = "displacement"
    record_iterates: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iters < 0:
            raise ConfigurationError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.map_mode not in MAP_MODES:
            raise ConfigurationError(f"unknown map_mode {self.map_mode!r}; valid: {', '.join(MAP_MODES)}")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class ProjectionTrace:
    energies: list
    rec_terms: list
    l1_terms: list
    best_iterate: np.ndarray
    best_energy: float
    best_index: int
    iterates: Optional[list] = None
    warning: Optional[str] = None

    @property
    def n_steps(self) -> int:
        return len(self.energies) - 1


def energy_terms(model: VAE, x_t: torch.Tensor, x_0: torch.Tensor, lam: float):
    """Per-sample ``(energy, rec_term, l1_term)`` for a batch."""
    recon = model(x_t, mode="deterministic").reconstruction
    rec, _ = losses.reconstruction_nll(x_t, recon)
    l1 = (x_t - x_0).abs().flatten(1).sum(1)
    return rec + lam * l1, rec, l1


def energy(model: VAE, x_t, x_0, lam: float):
    """Energy of ``x_t`` relative to ``x_0``: a float for one image, an
    array for a batch."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    dt = model._param_dtype()
    xt, x0 = _as_batch(x_t, dt), _as_batch(x_0, dt)
    if xt.shape != x0.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(x0.shape)}")
    with torch.no_grad():
        e, _, _ = energy_terms(model, xt, x0, lam)
    e = e.numpy().astype(np.float64)
    return float(e[0]) if np.ndim(x_t) < 4 else e


def project_batch(model: VAE, x0, cfg: ProjectionConfig) -> list:
    """Project every image of a batch independently.

    Each image keeps its own Adam moments, step count and early-stopping
    state, so results match projecting the images one at a time.
    """
    dt = model._param_dtype()
    x0 = _as_batch(x0, dt).detach()
    B = x0.shape[0]
    b1, b2 = cfg.adam_betas
    x = x0.clone()
    m = torch.zeros_like(x)
    v = torch.zeros_like(x)
    steps = torch.zeros(B, dtype=dt)
    active = torch.ones(B, dtype=torch.bool)
    best_x = x0.clone()
    best_e = torch.full((B,), float("inf"), dtype=torch.float64)
    best_i = torch.zeros(B, dtype=torch.long)
    energies = [[] for _ in range(B)]
    recs = [[] for _ in range(B)]
    l1s = [[] for _ in range(B)]
    iterates = [[] for _ in range(B)] if cfg.record_iterates else None
    warnings = [None] * B
    was_training = model.training
    grad_flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        for t in range(cfg.max_iters + 1):
            xt = x.clone().requires_grad_(True)
            with torch.enable_grad():
                e, rec, l1 = energy_terms(model, xt, x0, cfg.lam)
                (grad,) = torch.autograd.grad(e.sum(), xt)
            e64 = e.detach().double()
            rec, l1 = rec.detach(), l1.detach()
            finite = torch.isfinite(e64) & torch.isfinite(grad).flatten(1).all(1)
            for b in torch.nonzero(active).flatten().tolist():
                if not finite[b]:
                    warnings[b] = f"non-finite energy at iteration {t}; returning best iterate"
                    log.warning("projection of image %d: %s", b, warnings[b])
                    active[b] = False
                    continue
                energies[b].append(float(e64[b]))
                recs[b].append(float(rec[b]))
                l1s[b].append(float(l1[b]))
                if iterates is not None:
                    iterates[b].append(x[b, 0].numpy().copy())
                if e64[b] < best_e[b]:
                    best_e[b] = e64[b]
                    best_i[b] = t
                    best_x[b] = x[b]
                elif cfg.early_stop_patience and t - int(best_i[b]) >= cfg.early_stop_patience:
                    active[b] = False
            if t == cfg.max_iters or not active.any():
                break
            # one Adam step on the still-active images only
            sel = active.view(B, 1, 1, 1)
            g = torch.where(sel, grad, torch.zeros_like(grad))
            steps = steps + active.to(dt)
            m = torch.where(sel, b1 * m + (1 - b1) * g, m)
            v = torch.where(sel, b2 * v + (1 - b2) * g * g, v)
            k = steps.clamp(min=1).view(B, 1, 1, 1)
            m_hat = m / (1 - b1 ** k)
            v_hat = v / (1 - b2 ** k)
            x = torch.where(sel, x - cfg.alpha * m_hat / (v_hat.sqrt() + cfg.adam_eps), x)
    finally:
        for p, flag in zip(model.parameters(), grad_flags):
            p.requires_grad_(flag)
        model.train(was_training)

    traces = []
    for b in range(B):
        if not energies[b]:
            # even x_0 was non-finite: fall back to the input
            traces.append(ProjectionTrace([], [], [], x0[b, 0].numpy().astype(np.float64),
                                          float("nan"), 0, None, warnings[b]))
            continue
        traces.append(ProjectionTrace(
            energies=energies[b], rec_terms=recs[b], l1_terms=l1s[b],
            best_iterate=best_x[b, 0].numpy().astype(np.float64),
            best_energy=float(best_e[b]), best_index=int(best_i[b]),
            iterates=iterates[b] if iterates is not None else None,
            warning=warnings[b]))
        assert traces[-1].best_energy <= traces[-1].energies[0]
    return traces


def project(model: VAE, x0, cfg: ProjectionConfig) -> ProjectionTrace:
    return project_batch(model, _as_batch(x0)[:1], cfg)[0]


def _map_from_trace(model: VAE, x0: np.ndarray, trace: ProjectionTrace, mode: str) -> np.ndarray:
    if mode == "displacement":
        return (x0 - trace.best_iterate) ** 2
    with torch.no_grad():
        recon = model(_as_batch(trace.best_iterate, model._param_dtype()), mode="deterministic").reconstruction
    return (x0 - recon[0, 0].double().numpy()) ** 2


def proj_rec_error_batch(model: VAE, x0, cfg: ProjectionConfig, chunk: int = 50):
    """Returns ``(maps (B, H, W), traces)``."""
    x = _as_batch(x0)
    maps, traces = [], []
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        tr = project_batch(model, xb, cfg)
        base = xb.to(model._param_dtype())[:, 0].double().numpy()
        maps.extend(_map_from_trace(model, base[b], trace, cfg.map_mode) for b, trace in enumerate(tr))
        traces.extend(tr)
    return np.stack(maps), traces


def proj_rec_error_map(model: VAE, x0, cfg: ProjectionConfig) -> AnomalyMap:
    """Squared per-pixel displacement between the input and its projection
    (or, with ``map_mode="reconstruction"``, the reconstruction error of the
    projected image against the input)."""
    maps, _ = proj_rec_error_batch(model, _as_batch(x0)[:1], cfg)
    return AnomalyMap(maps[0], "proj_rec_error", model.fingerprint())


def write_trace_csv(path, trace: ProjectionTrace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "energy", "L1_term", "rec_term"])
        for i, (e, l1, r) in enumerate(zip(trace.energies, trace.l1_terms, trace.rec_terms)):
            w.writerow([i, repr(e), repr(l1), repr(r)])
    return path
