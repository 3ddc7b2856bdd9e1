"""Synthetic benchmark, anomaly injection, normalisation, augmentation and
image-directory loading.

Every random draw goes through an explicit ``numpy.random.Generator`` built
from a seed; nothing touches global RNG state.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError
from .gridio import read_grid
from .model import ImageBatch

log = logging.getLogger(__name__)

TEXTURES = ("gaussian_blobs", "sinusoidal", "smooth_noise")
ANOMALY_SHAPES = ("disk", "square", "irregular_blob")
IMAGE_SUFFIXES = (".png", ".grid")
# metadata written next to datasets by this package; not reported as skipped
SIDECAR_FILES = ("manifest.json", "resolved_config.txt")


@dataclass
class SyntheticConfig:
    n_images: int = 100
    image_size: int = 64
    texture: str = "gaussian_blobs"
    texture_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ConfigurationError(f"n_images must be >= 1, got {self.n_images}")
        if self.texture not in TEXTURES:
            raise ConfigurationError(f"unknown texture {self.texture!r}; valid: {', '.join(TEXTURES)}")


@dataclass
class AnomalySpec:
    shape: str = "disk"
    radius_range: tuple = (4, 8)
    intensity_shift_range: tuple = (2.0, 3.0)
    per_image_count: tuple = (1, 1)
    sign: str = "positive"  # positive | negative | random
    seed: int = 0

    def __post_init__(self):
        if self.shape not in ANOMALY_SHAPES:
            raise ConfigurationError(f"unknown anomaly shape {self.shape!r}")
        if min(self.radius_range) < 1:
            raise ConfigurationError("anomaly radius must be >= 1 pixel")
        lo, hi = self.intensity_shift_range
        if not 0 < lo <= hi:
            raise ConfigurationError("intensity_shift_range must be positive magnitudes (lo <= hi)")
        if self.sign not in ("positive", "negative", "random"):
            raise ConfigurationError(f"unknown sign {self.sign!r}")


@dataclass
class AugmentConfig:
    noise_std: float = 0.0
    rotation_degrees_max: float = 0.0
    intensity_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.noise_std, self.rotation_degrees_max, self.intensity_jitter) < 0:
            raise ConfigurationError("augmentation parameters must be nonnegative")

    @property
    def is_identity(self) -> bool:
        return self.noise_std == 0 and self.rotation_degrees_max == 0 and self.intensity_jitter == 0


# --- synthetic normals -------------------------------------------------------

def _grid(size):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _blobs(rng, size, p):
    # two blobs x (row, col, width, amplitude) = 8 latent factors
    yy, xx = _grid(size)
    img = np.zeros((size, size))
    for _ in range(p.get("n_blobs", 2)):
        cy, cx = rng.uniform(0.25, 0.75, 2)
        w = rng.uniform(*p.get("width_range", (0.08, 0.2)))
        a = rng.uniform(*p.get("amplitude_range", (0.5, 1.0)))
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
    return img


def _sinusoid(rng, size, p):
    yy, xx = _grid(size)
    f = rng.uniform(*p.get("frequency_range", (1.0, 3.0)))
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(*p.get("amplitude_range", (0.5, 1.0)))
    return amp * np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _smooth_noise(rng, size, p):
    # cos/sin pairs on four low frequencies = 8 latent factors
    yy, xx = _grid(size)
    img = np.zeros((size, size))
    for ky, kx in p.get("frequencies", ((1, 0), (0, 1), (1, 1), (1, -1))):
        arg = 2 * np.pi * (ky * yy + kx * xx)
        a, b = rng.normal(0.0, p.get("scale", 0.5), 2)
        img += a * np.cos(arg) + b * np.sin(arg)
    return img


_TEXTURE_FNS = {"gaussian_blobs": _blobs, "sinusoidal": _sinusoid, "smooth_noise": _smooth_noise}


def generate_synthetic_normal(cfg: SyntheticConfig) -> np.ndarray:
    """Raw (unnormalised) normal images, shape ``(n_images, 1, S, S)``."""
    rng = np.random.default_rng(cfg.seed)
    fn = _TEXTURE_FNS[cfg.texture]
    out = np.empty((cfg.n_images, 1, cfg.image_size, cfg.image_size))
    for i in range(cfg.n_images):
        out[i, 0] = fn(rng, cfg.image_size, cfg.texture_params)
    return out


# --- anomaly injection -------------------------------------------------------

def _shape_mask(shape, size, center, radius, rng):
    rows, cols = np.indices((size, size))
    dy, dx = rows - center[0], cols - center[1]
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    theta = np.arctan2(dy, dx)
    r = np.ones_like(theta)
    for k in (2, 3, 4):
        r += 0.3 / k * rng.uniform(-1, 1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(dy, dx) <= np.maximum(radius * r, 1.0)


def inject_anomaly(image, spec: AnomalySpec, rng: Optional[np.random.Generator] = None,
                   center: Optional[Sequence[int]] = None):
    """Add anomalous regions to one image.

    Returns ``(modified, mask)``. Every masked pixel is shifted by a constant
    whose magnitude lies in ``spec.intensity_shift_range``; pixels outside the
    mask are returned bit-identical. ``center`` pins the first region's
    (row, col).
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    image = np.asarray(image)
    size = image.shape[-1]
    lo, hi = spec.per_image_count
    count = int(rng.integers(lo, hi + 1))
    delta = np.zeros(image.shape[-2:])
    mask = np.zeros(image.shape[-2:], dtype=bool)
    for k in range(count):
        radius = int(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
        if k == 0 and center is not None:
            c = tuple(center)
        else:
            c = tuple(rng.integers(radius, size - radius, 2)) if size > 2 * radius else (size // 2,) * 2
        shift = rng.uniform(*spec.intensity_shift_range)
        if spec.sign == "negative" or (spec.sign == "random" and rng.random() < 0.5):
            shift = -shift
        region = _shape_mask(spec.shape, size, c, radius, rng)
        delta[region] = shift
        mask |= region
    out = image.copy()
    out[..., mask] = image[..., mask] + delta[mask]
    return out, mask


def inject_anomalies(images, spec: AnomalySpec):
    """Apply :func:`inject_anomaly` to every image of a ``(B, 1, H, W)`` array
    with a single generator seeded from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    out = np.empty_like(images)
    masks = np.zeros((images.shape[0],) + images.shape[-2:], dtype=bool)
    for i in range(images.shape[0]):
        out[i], masks[i] = inject_anomaly(images[i], spec, rng=rng)
    return out, masks


# --- normalisation -----------------------------------------------------------

def dataset_stats(images) -> tuple:
    a = np.asarray(images, dtype=np.float64)
    mean, std = float(a.mean()), float(a.std())
    if not std > 0 or not np.isfinite(std):
        raise DataError("dataset has zero variance; cannot normalise")
    return mean, std


def apply_normalization(images, stats) -> np.ndarray:
    mean, std = stats
    return (np.asarray(images, dtype=np.float64) - mean) / std


def denormalize(images, stats) -> np.ndarray:
    mean, std = stats
    return np.asarray(images, dtype=np.float64) * std + mean


def normalize_dataset(images, stats=None):
    """Normalise to zero mean / unit variance over the whole dataset.

    Pass ``stats`` from a training set to reuse them on test data.
    Returns ``(ImageBatch, stats)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    if stats is None:
        stats = dataset_stats(images)
    return ImageBatch(apply_normalization(images, stats), stats), tuple(stats)


# --- augmentation ------------------------------------------------------------

def augment(image, cfg: AugmentConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Rotation (bilinear), intensity jitter (gain and bias), additive noise."""
    image = np.asarray(image, dtype=np.float64)
    if cfg.is_identity:
        return image.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out = image
    if cfg.rotation_degrees_max > 0:
        angle = rng.uniform(-cfg.rotation_degrees_max, cfg.rotation_degrees_max)
        out = ndimage.rotate(out, angle, axes=(-2, -1), reshape=False, order=1, mode="nearest")
    if cfg.intensity_jitter > 0:
        j = cfg.intensity_jitter
        out = out * rng.uniform(1 - j, 1 + j) + rng.uniform(-j, j)
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, out.shape)
    return out


# --- directory ingestion -----------------------------------------------------

@dataclass
class LoadedImages:
    batch: ImageBatch
    names: list
    masks: Optional[np.ndarray] = None
    skipped: list = field(default_factory=list)

    def manifest(self) -> dict:
        return {"files": list(self.names), "skipped": list(self.skipped),
                "normalization_stats": list(self.batch.normalization_stats),
                "has_masks": self.masks is not None}


def _read_gray(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".grid":
        return read_grid(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as img:
        img.load()
        if img.mode in ("I;16", "I;16B", "I;16L", "I", "F", "L"):
            return np.asarray(img, dtype=np.float64)
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])


def _resize(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    from PIL import Image

    resample = Image.NEAREST if nearest else Image.BILINEAR
    img = Image.fromarray(arr.astype(np.float32), mode="F").resize((size, size), resample)
    return np.asarray(img, dtype=np.float64)


def load_image_dir(path, target_size: int = 64, normalization="fit",
                   masks_subdir: str = "masks") -> LoadedImages:
    """Load every PNG / grid image in ``path`` (sorted by name).

    ``normalization`` is ``"fit"`` or a ``(mean, std)`` pair to reuse. Masks
    are paired by filename stem from ``path/masks_subdir`` when it exists;
    nonzero mask pixels are anomalous. Unreadable files are skipped with a
    warning and listed in ``skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    arrays, names, skipped = [], [], []
    for f in sorted(p for p in root.iterdir() if p.is_file()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            if f.name not in SIDECAR_FILES:
                log.warning("skipping non-image file %s", f.name)
                skipped.append({"file": f.name, "reason": "not an image"})
            continue
        try:
            arr = _read_gray(f)
        except Exception as exc:  # noqa: BLE001 - any decoder failure means skip
            log.warning("skipping unreadable file %s: %s", f.name, exc)
            skipped.append({"file": f.name, "reason": str(exc)})
            continue
        arrays.append(_resize(arr, target_size))
        names.append(f.name)
    if not arrays:
        raise DataError(f"no readable images in {root}")
    images = np.stack(arrays)[:, None]
    stats = None if normalization == "fit" else tuple(normalization)
    batch, _ = normalize_dataset(images, stats)

    masks = None
    mdir = root / masks_subdir
    if mdir.is_dir():
        by_stem = {p.stem: p for p in mdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        missing = [n for n in names if Path(n).stem not in by_stem]
        if missing:
            raise DataError(f"masks missing for: {', '.join(missing[:5])}")
        masks = np.stack([_resize(_read_gray(by_stem[Path(n).stem]), target_size, nearest=True) != 0
                          for n in names])
    return LoadedImages(batch=batch, names=names, masks=masks, skipped=skipped)


def write_manifest(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
