"""Synthetic PET/CT/GTV cases for desk-scale runs and tests."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import BoundingBox, PatientCase, Volume

CENTERS = ("CHGJ", "CHMR", "CHUM", "CHUS")
DEFAULT_SPACING = (0.98, 0.98, 3.27)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return dist <= 1.0


def _smooth_field(rng, shape, sigma, lo, hi) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    span = field.max() - field.min()
    return lo + (field - field.min()) / (span if span > 0 else 1.0) * (hi - lo)


def generate_phantom(
    seed: int,
    extent: int = 48,
    n_lesions: int = 1,
    *,
    spacing=DEFAULT_SPACING,
    center_id: str | None = None,
    case_id: str | None = None,
    lesion_radius: tuple[float, float] | None = None,
) -> PatientCase:
    """Procedural head-and-neck-like case, deterministic per seed.

    CT: smooth soft-tissue background in [-200, 200] HU inside an elliptical
    body (air outside) with a dense bony ellipsoid. PET: low background with
    lesions 5-10x brighter. The GTV is exactly the union of the lesions.
    """
    if extent < 16 or extent % 16:
        raise ValueError(f"phantom extent must be a positive multiple of 16, got {extent}")
    if n_lesions < 0:
        raise ValueError("n_lesions must be >= 0")
    rng = np.random.default_rng(seed)
    shape = (extent,) * 3
    mid = (extent - 1) / 2.0

    body = _ellipsoid(shape, (mid, mid, mid), (0.46 * extent, 0.40 * extent, 0.49 * extent))
    tissue = _smooth_field(rng, shape, extent / 12.0, -200.0, 200.0)
    ct = np.where(body, tissue, -1000.0)
    spine_center = (mid, mid + 0.22 * extent, mid)
    spine = _ellipsoid(shape, spine_center, (0.07 * extent, 0.07 * extent, 0.45 * extent))
    ct[spine] = 700.0

    background = 1.0 + 0.2 * _smooth_field(rng, shape, extent / 16.0, 0.0, 1.0)
    pet = np.where(body, background, 0.1 * background)
    gtv = np.zeros(shape, dtype=bool)
    r_lo, r_hi = lesion_radius or (extent / 12.0, extent / 7.0)
    for _ in range(n_lesions):
        radii = rng.uniform(r_lo, r_hi, size=3)
        margin = radii.max() + 2
        center = rng.uniform(margin, extent - 1 - margin, size=3)
        lesion = _ellipsoid(shape, center, radii) & body & ~spine
        if not lesion.any():
            lesion = _ellipsoid(shape, center, radii)
        uptake = rng.uniform(5.0, 10.0)
        pet[lesion] = uptake * background[lesion]
        ct[lesion] = np.clip(ct[lesion] + 40.0, -200, 200)
        gtv |= lesion
    pet = pet + rng.normal(0.0, 0.05, size=shape)
    pet = np.clip(pet, 0.0, None)

    if center_id is None:
        center_id = CENTERS[seed % len(CENTERS)]
    case_id = case_id or f"{center_id}{seed:03d}"
    return PatientCase(
        case_id,
        center_id,
        Volume(pet.astype(np.float32), spacing, (0, 0, 0), "PET"),
        Volume(np.round(ct).astype(np.int16), spacing, (0, 0, 0), "CT"),
        Volume(gtv.astype(np.uint8), spacing, (0, 0, 0), "MASK"),
        BoundingBox.full(shape),
    )
