"""PNG slice mosaics with mask overlays for quick visual review."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

RED = (255, 0, 0)
BLUE = (0, 90, 255)


def _slices(depth: int, n: int) -> np.ndarray:
    n = max(1, min(n, depth))
    return np.unique(np.linspace(0, depth - 1, n + 2)[1:-1].round().astype(int)) if depth > 2 \
        else np.arange(depth)


def _gray(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img, dtype=float)
    g = (scaled * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1).astype(float)


def _blend(rgb: np.ndarray, mask: np.ndarray, colour, alpha: float) -> np.ndarray:
    m = mask.astype(bool)
    rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(colour, dtype=float)
    return rgb


def overlay_mosaic(image: np.ndarray, masks: Sequence[np.ndarray] = (),
                   colours: Sequence = (RED,), n_slices: int = 8, alpha: float = 0.5,
                   columns: int = 4) -> Image.Image:
    """Tile axial slices of ``image`` (H, W, D) with each mask alpha-blended in its colour."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {image.shape}")
    idx = _slices(image.shape[2], n_slices)
    tiles = []
    for k in idx:
        rgb = _gray(image[:, :, k])
        for mask, colour in zip(masks, colours):
            rgb = _blend(rgb, np.asarray(mask)[:, :, k], colour, alpha)
        tiles.append(rgb.astype(np.uint8))
    columns = max(1, min(columns, len(tiles)))
    rows = -(-len(tiles) // columns)
    h, w = tiles[0].shape[:2]
    canvas = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, columns)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = t
    return Image.fromarray(canvas)


def save_synth_overlay(x_prime: np.ndarray, y_hat: np.ndarray, path, n_slices: int = 8) -> Path:
    """Pseudo-label in red over the mixed image."""
    path = Path(path)
    overlay_mosaic(x_prime, [y_hat], [RED], n_slices).save(path)
    return path


def save_prediction_overlay(image: np.ndarray, pred: np.ndarray, path,
                            truth: Optional[np.ndarray] = None, n_slices: int = 8) -> Path:
    """Ground truth in blue (when given) and the prediction in red over ``image``."""
    path = Path(path)
    masks, colours = [pred], [RED]
    if truth is not None:
        masks, colours = [truth, pred], [BLUE, RED]
    overlay_mosaic(image, masks, colours, n_slices).save(path)
    return path
