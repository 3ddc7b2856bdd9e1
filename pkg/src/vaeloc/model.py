"""Convolutional VAE: encoder/decoder, reparameterisation, input gradients."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import losses
from .errors import ConfigurationError, NumericalError

LOSS_SELECTORS = ("elbo", "kl", "rec")


@dataclass
class ModelConfig:
    image_size: int = 64
    latent_dim: int = 32
    encoder_channels: Sequence[int] = field(default_factory=lambda: [16, 32, 64, 256])
    leaky_slope: float = 0.01
    sigma_log_clamp: Sequence[float] = (-6.0, 4.0)

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.sigma_log_clamp = tuple(float(v) for v in self.sigma_log_clamp)
        if self.latent_dim < 1:
            raise ConfigurationError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ConfigurationError(f"encoder_channels must be positive, got {self.encoder_channels}")
        stride = 2 ** len(self.encoder_channels)
        if self.image_size % stride or self.image_size < stride:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2^{len(self.encoder_channels)}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        lo, hi = self.sigma_log_clamp
        if not lo < hi:
            raise ConfigurationError(f"bad sigma_log_clamp {self.sigma_log_clamp}")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** len(self.encoder_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["sigma_log_clamp"] = list(self.sigma_log_clamp)
        return d


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


@dataclass
class VAEOutput:
    latent: GaussianLatent
    z: torch.Tensor
    reconstruction: torch.Tensor


@dataclass
class ImageBatch:
    """Normalised grayscale images, shape ``(B, 1, H, W)``, plus the
    ``(mean, std)`` used to normalise them."""

    data: np.ndarray
    normalization_stats: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[1] != 1:
            raise ConfigurationError(f"ImageBatch needs shape (B, 1, H, W), got {self.data.shape}")
        if self.data.shape[2] != self.data.shape[3]:
            raise ConfigurationError(f"ImageBatch images must be square, got {self.data.shape}")
        mean, std = self.normalization_stats
        if not std > 0:
            raise ConfigurationError(f"normalization std must be > 0, got {std}")
        self.normalization_stats = (float(mean), float(std))

    def __len__(self):
        return self.data.shape[0]

    @property
    def image_size(self) -> int:
        return self.data.shape[-1]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.data, dtype=dtype)


def _as_batch(x, dtype=None) -> torch.Tensor:
    if isinstance(x, ImageBatch):
        x = x.data
    t = torch.as_tensor(x)
    if dtype is not None:
        t = t.to(dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    return t


class VAE(nn.Module):
    """Fully convolutional VAE.

    Encoder: one stride-2 4x4 convolution per entry of ``encoder_channels``
    (each followed by LeakyReLU), then a convolution whose kernel covers the
    whole bottleneck and emits ``2 * latent_dim`` channels (mu, log_sigma).
    The decoder mirrors it with transposed convolutions and ends linearly,
    giving the Gaussian mean of p(x|z).
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        slope = cfg.leaky_slope
        ch = list(cfg.encoder_channels)
        k = cfg.bottleneck_size

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = []
            c_in = 1
            for c in ch:
                enc += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(slope)]
                c_in = c
            self.encoder = nn.Sequential(*enc)
            self.head = nn.Conv2d(ch[-1], 2 * cfg.latent_dim, k)

            dec = [nn.ConvTranspose2d(cfg.latent_dim, ch[-1], k), nn.LeakyReLU(slope)]
            rev = ch[::-1] + [1]
            for i, (c_in, c_out) in enumerate(zip(rev[:-1], rev[1:])):
                dec.append(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1))
                if i < len(ch) - 1:
                    dec.append(nn.LeakyReLU(slope))
            self.decoder = nn.Sequential(*dec)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _check_input(self, x: torch.Tensor):
        s = self.config.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, s, s):
            raise ConfigurationError(
                f"expected input of shape (B, 1, {s}, {s}), got {tuple(x.shape)}")

    def _param_dtype(self):
        return next(self.parameters()).dtype

    def encode(self, x) -> GaussianLatent:
        x = _as_batch(x, self._param_dtype())
        self._check_input(x)
        h = self.head(self.encoder(x)).flatten(1)
        mu, log_sigma = h.chunk(2, dim=1)
        lo, hi = self.config.sigma_log_clamp
        return GaussianLatent(mu=mu, log_sigma=torch.clamp(log_sigma, lo, hi))

    def decode(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=self._param_dtype())
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.latent_dim:
            raise ConfigurationError(f"z has length {z.shape[-1]}, model expects {self.latent_dim}")
        return self.decoder(z[:, :, None, None])

    def forward(self, x, mode: str = "deterministic",
                generator: Optional[torch.Generator] = None) -> VAEOutput:
        latent = self.encode(x)
        if mode == "deterministic":
            z = latent.mu
        elif mode == "sample":
            z = reparameterize(latent, generator=generator)
        else:
            raise ConfigurationError(f"unknown forward mode {mode!r}")
        return VAEOutput(latent=latent, z=z, reconstruction=self.decode(z))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        for name, p in self.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def reparameterize(latent: GaussianLatent, noise=None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """``z = mu + exp(log_sigma) * noise``; noise is drawn from ``generator``
    when not given."""
    mu = latent.mu
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    noise = torch.as_tensor(noise, dtype=mu.dtype)
    if noise.shape != mu.shape:
        raise ConfigurationError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(mu.shape)}")
    return mu + torch.exp(latent.log_sigma) * noise


def selected_loss(model: VAE, x: torch.Tensor, which: str, sample: bool = False,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Per-sample loss ``(B,)`` picked by ``which``; ``elbo`` is rec + kl."""
    if which not in LOSS_SELECTORS:
        raise ConfigurationError(f"unknown loss selector {which!r}; valid: {', '.join(LOSS_SELECTORS)}")
    latent = model.encode(x)
    if which == "kl":
        return losses.kl_divergence(latent)[0]
    z = reparameterize(latent, generator=generator) if sample else latent.mu
    rec = losses.reconstruction_nll(x, model.decode(z))[0]
    if which == "rec":
        return rec
    return rec + losses.kl_divergence(latent)[0]


def input_gradient(model: VAE, x, which: str = "elbo", sample: bool = False,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """d(loss)/dx for every pixel, with model parameters held fixed.

    Samples in a batch do not interact, so a batch gives each image's own
    gradient. ``sample=True`` uses one reparameterised draw instead of z = mu.
    """
    x = _as_batch(x, model._param_dtype()).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = selected_loss(model, x, which, sample=sample, generator=generator).sum()
        (grad,) = torch.autograd.grad(loss, x)
    bad = ~torch.isfinite(grad)
    if bad.any():
        raise NumericalError(
            f"input_gradient({which}): {int(bad.sum())} of {grad.numel()} pixels non-finite")
    return grad
