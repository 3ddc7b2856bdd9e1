"""Binary float grids and PNG heatmaps.

Grid layout (little endian): 4-byte magic ``b"VGRD"``, uint16 height,
uint16 width, then ``height * width`` float32 values in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

GRID_MAGIC = b"VGRD"
_HEADER = struct.Struct("<4sHH")

HEATMAP_COLORMAP = "inferno"


def write_grid(path, array) -> Path:
    a = np.asarray(array, dtype="<f4")
    a = np.squeeze(a) if a.ndim > 2 else a
    if a.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {np.shape(array)}")
    h, w = a.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, h, w))
        fh.write(np.ascontiguousarray(a).tobytes())
    return path


def read_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated grid header")
    magic, h, w = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise DataError(f"{path}: bad grid magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * h * w:
        raise DataError(f"{path}: expected {4 * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def write_heatmap_png(path, scores) -> Path:
    """Render ``scores`` with a fixed colormap after per-image min-max scaling.

    The scaling range is stored in the PNG text metadata.
    """
    from matplotlib import colormaps
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    s = np.squeeze(np.asarray(scores, dtype=np.float64))
    lo, hi = float(s.min()), float(s.max())
    scaled = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    rgba = colormaps[HEATMAP_COLORMAP](scaled)
    rgb = (rgba[..., :3] * 255).round().astype(np.uint8)
    info = PngInfo()
    info.add_text("scaling", f"per-image min-max; min={lo!r}; max={hi!r}; colormap={HEATMAP_COLORMAP}")
    path = Path(path)
    Image.fromarray(rgb, mode="RGB").save(path, pnginfo=info)
    return path
