"""Static PNG montages of axial slices with the mask contour burned in."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

from .data.volume import Volume

CONTOUR_RGB = (255, 0, 0)


def axial_indices(depth: int, n_slices: int) -> list[int]:
    """``n_slices`` distinct axial indices spread evenly around the middle slice."""
    n = min(n_slices, depth)
    if n == 1:
        return [(depth - 1) // 2]
    lo, hi = depth // 4, depth - 1 - depth // 4
    if hi - lo + 1 < n:
        lo, hi = 0, depth - 1
    return sorted(set(np.linspace(lo, hi, n).round().astype(int).tolist()))


def contour(mask: np.ndarray) -> np.ndarray:
    """In-plane boundary of a 2-D mask; the image border counts as outside."""
    m = mask.astype(bool)
    return m & ~binary_erosion(m, border_value=0)


def _gray(slab: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (slab.astype(np.float64) - lo) / (hi - lo) if hi > lo else np.zeros(slab.shape)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)


def render_montage(mask: Volume, underlay: Volume, n_slices: int = 5) -> np.ndarray:
    """RGB uint8 montage, one tile per axial slice, rows along y and columns along x."""
    if mask.shape != underlay.shape or not np.allclose(mask.spacing, underlay.spacing):
        raise ValueError(f"mask grid {mask.shape}/{mask.spacing} does not match underlay {underlay.shape}/{underlay.spacing}")
    lo, hi = float(underlay.data.min()), float(underlay.data.max())
    tiles = []
    for z in axial_indices(underlay.shape[2], n_slices):
        gray = _gray(underlay.data[:, :, z].T, lo, hi)
        tile = np.repeat(gray[..., None], 3, axis=2)
        tile[contour(mask.data[:, :, z].T)] = CONTOUR_RGB
        tiles.append(tile)
    return np.concatenate(tiles, axis=1)


def export_slices(mask: Volume, underlay: Volume, path, n_slices: int = 5) -> Path:
    """Write the montage as PNG; identical inputs give byte-identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_montage(mask, underlay, n_slices), mode="RGB").save(path, format="PNG", optimize=False)
    return path
