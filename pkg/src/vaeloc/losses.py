"""ELBO pieces: Gaussian reconstruction NLL, closed-form KL, beta-weighted total.

All functions work on torch tensors so they can sit inside an autograd graph.
Per-sample values are sums over pixels (or latent dimensions); batch reductions
are means, and pixel maps are never averaged over the batch.

The Gaussian normalisation constant of the reconstruction term is dropped, so
loss magnitudes are only comparable within this package.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, NumericalError


@dataclass
class LossBreakdown:
    rec_nll: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor
    rec_pixel_map: torch.Tensor
    beta: float

    def as_floats(self) -> dict:
        return {"rec_nll": float(self.rec_nll), "kl": float(self.kl),
                "total": float(self.total), "beta": float(self.beta)}


def _sample_dims(t: torch.Tensor) -> tuple:
    # (B, C, H, W) keeps the batch axis; anything else is one sample
    return tuple(range(1, t.ndim)) if t.ndim == 4 else tuple(range(t.ndim))


def reconstruction_nll(x, recon):
    """Return ``(0.5 * sum((x - recon)**2), (x - recon)**2)``.

    For rank-4 input the scalar is per sample, shape ``(B,)``.
    """
    x = torch.as_tensor(x)
    recon = torch.as_tensor(recon)
    if x.shape != recon.shape:
        raise ConfigurationError(f"shape mismatch: x {tuple(x.shape)} vs recon {tuple(recon.shape)}")
    pixel_map = (x - recon) ** 2
    return 0.5 * pixel_map.sum(dim=_sample_dims(pixel_map)), pixel_map


def kl_terms(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """Per-dimension KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (mu ** 2 + torch.exp(2.0 * log_sigma) - 2.0 * log_sigma - 1.0)


def kl_divergence(latent):
    """Closed-form KL of a diagonal Gaussian posterior to the standard normal.

    ``latent`` is anything with ``mu`` and ``log_sigma`` attributes (or a
    ``(mu, log_sigma)`` pair). Returns ``(scalar, per_dim)``; the scalar sums
    over the last axis, so a batched latent gives one value per sample.
    """
    if isinstance(latent, tuple):
        mu, log_sigma = latent
    else:
        mu, log_sigma = latent.mu, latent.log_sigma
    mu = torch.as_tensor(mu)
    log_sigma = torch.as_tensor(log_sigma)
    if not (torch.isfinite(mu).all() and torch.isfinite(log_sigma).all()):
        raise NumericalError("kl_divergence: latent contains non-finite entries")
    per_dim = kl_terms(mu, log_sigma)
    return per_dim.sum(dim=-1), per_dim


def beta_elbo_loss(x, output, beta: float = 1.0) -> LossBreakdown:
    """Batch-mean ``rec_nll + beta * kl`` for a model output.

    ``beta = 1`` is the plain VAE loss.
    """
    if not beta > 0:
        raise ConfigurationError(f"beta must be positive, got {beta}")
    rec, pixel_map = reconstruction_nll(x, output.reconstruction)
    kl, _ = kl_divergence(output.latent)
    rec = rec.mean()
    kl = kl.mean()
    total = rec + beta * kl
    return LossBreakdown(rec_nll=rec, kl=kl, total=total, rec_pixel_map=pixel_map, beta=float(beta))
