"""Heatmap colouring and overlays for attribution maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import write_png


@dataclass(frozen=True)
class RenderSpec:
    colormap: str = "diverging"  # or "magnitude"
    alpha: float = 0.6
    normalization: str = "symmetric-max"  # or "minmax"

    def __post_init__(self):
        if self.colormap not in ("diverging", "magnitude"):
            raise ValueError(f"unknown colormap {self.colormap!r}")
        if self.normalization not in ("symmetric-max", "minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.colormap == "diverging" and self.normalization != "symmetric-max":
            raise ValueError("the diverging colormap needs symmetric-max normalization")


def diverging(t: np.ndarray) -> np.ndarray:
    """t in [-1, 1] -> blue (-1) / white (0) / red (+1), floats in [0, 1]."""
    t = np.clip(t, -1.0, 1.0)
    neg, pos = np.minimum(t, 0.0), np.maximum(t, 0.0)
    r = 1.0 + neg
    g = 1.0 - np.abs(t)
    b = 1.0 - pos
    return np.stack([r, g, b], axis=-1)


def black_hot(u: np.ndarray) -> np.ndarray:
    """u in [0, 1] -> black, red, yellow, white."""
    u = np.clip(u, 0.0, 1.0)
    return np.stack([np.clip(3 * u, 0, 1), np.clip(3 * u - 1, 0, 1), np.clip(3 * u - 2, 0, 1)], axis=-1)


def heat_layer(values: np.ndarray, spec: RenderSpec) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if spec.normalization == "symmetric-max":
        s = np.max(np.abs(v))
        t = v / s if s > 0 else np.zeros_like(v)
        return diverging(t) if spec.colormap == "diverging" else black_hot(np.abs(t))
    lo, hi = v.min(), v.max()
    u = (v - lo) / (hi - lo) if hi > lo else np.full_like(v, 0.5)
    return black_hot(u)


def render_heatmap(values: np.ndarray, base: np.ndarray | None, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """RGB uint8 overlay ``alpha * heat + (1 - alpha) * base``."""
    heat = heat_layer(values, spec)
    if base is None:
        out = heat
    else:
        base = np.asarray(base, dtype=np.float64)
        if base.shape != np.shape(values):
            raise ValueError(f"base image shape {base.shape} != map shape {np.shape(values)}")
        out = spec.alpha * heat + (1.0 - spec.alpha) * base[..., None]
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def default_spec(method: str) -> RenderSpec:
    if method == "occlusion":
        return RenderSpec("magnitude", 0.6, "minmax")
    return RenderSpec()


def grid(tiles: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally-sized RGB images row by row with white padding."""
    rows, cols = len(tiles), max(len(r) for r in tiles)
    h, w = tiles[0][0].shape[:2]
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = tile
    return out


def save_overlay(path, values, base, spec: RenderSpec | None = None, upscale: int = 4) -> None:
    img = render_heatmap(values, base, spec or RenderSpec())
    if upscale > 1:
        img = np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
    write_png(path, img)
