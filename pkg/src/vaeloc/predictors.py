"""Pixel-wise anomaly maps from a trained VAE.

All predictors run the encoder deterministically (z = mu). Available kinds:

``rec_error``  squared error between input and reconstruction
``elbo_grad``  |d(rec + kl)/dx|
``kl_grad``    |d kl/dx|
``rec_grad``   d rec/dx, as a magnitude unless ``abs_rec_grad=False``
``combi``      kl_grad * rec_error
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .errors import ConfigurationError
from .model import VAE, _as_batch, input_gradient
from . import losses

PREDICTOR_KINDS = ("rec_error", "elbo_grad", "kl_grad", "rec_grad", "combi")


@dataclass
class AnomalyMap:
    scores: np.ndarray
    kind: str
    model_fingerprint: str

    @property
    def shape(self):
        return self.scores.shape


def _check_kind(kind):
    if kind not in PREDICTOR_KINDS:
        raise ConfigurationError(f"unknown predictor {kind!r}; valid: {', '.join(PREDICTOR_KINDS)}")


def _np(t: torch.Tensor) -> np.ndarray:
    # (B, 1, H, W) -> (B, H, W)
    return t.detach().cpu().numpy()[:, 0].astype(np.float64)


def rec_error_batch(model: VAE, x) -> np.ndarray:
    x = _as_batch(x, model._param_dtype())
    with torch.no_grad():
        recon = model(x, mode="deterministic").reconstruction
        _, pixel_map = losses.reconstruction_nll(x, recon)
    return _np(pixel_map)


def grad_batch(model: VAE, x, which: str, abs_rec_grad: bool = True) -> np.ndarray:
    g = _np(input_gradient(model, x, which))
    if which == "rec" and not abs_rec_grad:
        return g
    return np.abs(g)


def predictor_maps(model: VAE, x, kinds: Iterable[str] = PREDICTOR_KINDS,
                   abs_rec_grad: bool = True, chunk: int = 64) -> dict:
    """Score a batch for several predictors at once.

    Returns ``{kind: array (B, H, W)}``; shared intermediates are computed once.
    """
    kinds = list(kinds)
    for k in kinds:
        _check_kind(k)
    x = _as_batch(x, model._param_dtype())
    need = set(kinds)
    if "combi" in need:
        need |= {"rec_error", "kl_grad"}
    parts = {k: [] for k in need}
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        if "rec_error" in need:
            parts["rec_error"].append(rec_error_batch(model, xb))
        for kind, which in (("elbo_grad", "elbo"), ("kl_grad", "kl"), ("rec_grad", "rec")):
            if kind in need:
                parts[kind].append(grad_batch(model, xb, which, abs_rec_grad))
    out = {k: np.concatenate(v) for k, v in parts.items() if v}
    if "combi" in need:
        out["combi"] = out["kl_grad"] * out["rec_error"]
    return {k: out[k] for k in kinds}


def _single(x):
    t = torch.as_tensor(x)
    if t.ndim == 4 and t.shape[0] != 1:
        raise ConfigurationError("expected a single image; use score() for batches")
    return t


def rec_error_map(model: VAE, x) -> AnomalyMap:
    return AnomalyMap(rec_error_batch(model, _single(x))[0], "rec_error", model.fingerprint())


def grad_map(model: VAE, x, which: str, abs_rec_grad: bool = True) -> AnomalyMap:
    """Gradient-magnitude map for ``which`` in {elbo, kl, rec}."""
    kind = {"elbo": "elbo_grad", "kl": "kl_grad", "rec": "rec_grad"}.get(which)
    if kind is None:
        raise ConfigurationError(f"unknown gradient selector {which!r}; valid: elbo, kl, rec")
    return AnomalyMap(grad_batch(model, _single(x), which, abs_rec_grad)[0], kind, model.fingerprint())


def combi_map(model: VAE, x) -> AnomalyMap:
    x = _single(x)
    scores = grad_batch(model, x, "kl")[0] * rec_error_batch(model, x)[0]
    return AnomalyMap(scores, "combi", model.fingerprint())


def score(model: VAE, x, kind: str, abs_rec_grad: bool = True):
    """Dispatch to one predictor.

    A single image (``(H, W)``, ``(1, H, W)`` or ``(1, 1, H, W)``) gives one
    :class:`AnomalyMap`; a ``(B, 1, H, W)`` batch with ``B > 1`` gives a list.
    """
    _check_kind(kind)
    t = torch.as_tensor(x)
    if t.ndim == 4 and t.shape[0] > 1:
        maps = predictor_maps(model, t, [kind], abs_rec_grad=abs_rec_grad)[kind]
        fp = model.fingerprint()
        return [AnomalyMap(m, kind, fp) for m in maps]
    if kind == "rec_error":
        return rec_error_map(model, t)
    if kind == "combi":
        return combi_map(model, t)
    return grad_map(model, t, kind.split("_")[0], abs_rec_grad=abs_rec_grad)
