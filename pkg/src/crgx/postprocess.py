"""Heatmap post-processing: normalization, bilinear upsampling, colormap
overlay. These take a tap-resolution heatmap to a full-resolution rendering."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

# checksum of the shipped lookup table, so renderings stay reproducible
COLORMAP_FILE = "colormap_jet.json"
COLORMAP_SHA256 = "98a84e8289d32d7427d2322a706e2c4d6654218eac458fde37137be31cf6d481"

_COLORMAP_CACHE: dict[str, np.ndarray] = {}


def load_colormap() -> np.ndarray:
    """The 256-entry RGB lookup table shipped with the package, shape
    (256, 3), values in [0,1]. The file's checksum is verified on first
    load so every install renders identical overlays."""
    cached = _COLORMAP_CACHE.get(COLORMAP_FILE)
    if cached is not None:
        return cached
    raw = resources.files("crgx").joinpath("data", COLORMAP_FILE).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != COLORMAP_SHA256:
        raise ValueError(f"colormap data file is corrupted: sha256 {digest} "
                         f"does not match expected {COLORMAP_SHA256}")
    payload = json.loads(raw)
    table = np.asarray(payload["entries"], dtype=np.float64)
    if table.shape != (256, 3):
        raise ValueError(f"colormap table has shape {table.shape}, expected (256, 3)")
    _COLORMAP_CACHE[COLORMAP_FILE] = table
    return table


@dataclass(frozen=True)
class OverlayStyle:
    """Blend weight for the colormap layer; 0 keeps the image, 1 shows
    only the rendered heatmap."""

    alpha: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")


def normalize_minmax(h: np.ndarray) -> np.ndarray:
    """Affine rescale to [0,1]; a constant map becomes all zeros."""
    h = np.asarray(h, dtype=np.float64)
    lo = float(np.min(h))
    hi = float(np.max(h))
    if hi == lo:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def upsample_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D map.

    Source corners land exactly on destination corners; a dimension of 1
    (either side) degenerates to constant replication along that axis.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2:
        raise ValueError(f"source map must be 2-D, got shape {src.shape}")
    if src.shape[0] < 1 or src.shape[1] < 1:
        raise ValueError(f"source dims must be >= 1, got {src.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be >= 1, got ({out_h}, {out_w})")

    def axis_coords(n_src: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_src == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * ((n_src - 1) / (n_out - 1))

    ys = axis_coords(src.shape[0], out_h)
    xs = axis_coords(src.shape[1], out_w)
    y0 = np.minimum(np.floor(ys).astype(np.intp), src.shape[0] - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), src.shape[1] - 1)
    y1 = np.minimum(y0 + 1, src.shape[0] - 1)
    x1 = np.minimum(x0 + 1, src.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = src[np.ix_(y0, x0)] * (1.0 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1.0 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bot * wy


def apply_colormap(h: np.ndarray) -> np.ndarray:
    """Map a [0,1] heatmap (H, W) through the lookup table to RGB planes
    (3, H, W). Values are binned by round-half-up to the 256 entries."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {h.shape}")
    if np.min(h) < 0.0 or np.max(h) > 1.0:
        raise ValueError("heatmap values must lie in [0,1]; normalize first")
    table = load_colormap()
    idx = np.clip(np.floor(h * 255.0 + 0.5).astype(np.intp), 0, 255)
    return np.moveaxis(table[idx], -1, 0)


def overlay(pixels: np.ndarray, h: np.ndarray, style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    """Blend (1 - alpha) * image + alpha * colormap(h). Accepts 1- or
    3-channel pixel planes (C, H, W) and always returns 3 channels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ValueError(f"expected pixel planes (1|3, H, W), got shape {pixels.shape}")
    if pixels.shape[1:] != np.shape(h):
        raise ValueError(f"heatmap resolution {np.shape(h)} does not match "
                         f"image {pixels.shape[1:]}")
    colored = apply_colormap(h)
    blended = (1.0 - style.alpha) * pixels + style.alpha * colored
    return np.clip(blended, 0.0, 1.0)
