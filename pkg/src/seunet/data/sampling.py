"""Tumour-biased random patch extraction for training."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .volume import PatientCase

PAD_VALUES = {"pet": 0.0, "ct": -1.0, "label": 0}


@dataclass
class SamplerConfig:
    patch: tuple[int, int, int] = (144, 144, 144)
    p_tumor: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        self.patch = tuple(int(n) for n in self.patch)  # type: ignore[assignment]
        if len(self.patch) != 3 or any(n < 16 or n % 16 for n in self.patch):
            raise ValueError(f"patch extents must be positive multiples of 16, got {self.patch}")
        if not 0.0 <= self.p_tumor <= 1.0:
            raise ValueError("p_tumor must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d


class SamplingError(RuntimeError):
    pass


def _pad_to(a: np.ndarray, shape, value) -> np.ndarray:
    if all(n >= p for n, p in zip(a.shape, shape)):
        return a
    pads = []
    for n, p in zip(a.shape, shape):
        extra = max(0, p - n)
        pads.append((extra // 2, extra - extra // 2))
    return np.pad(a, pads, constant_values=value)


def tumor_window_mask(label: np.ndarray, patch) -> np.ndarray:
    """Boolean map over window origins: True where the window holds >= 1 tumour voxel."""
    # 3-D summed-area table with a zero border
    table = np.zeros(tuple(n + 1 for n in label.shape), dtype=np.int64)
    table[1:, 1:, 1:] = label.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    px, py, pz = patch
    nx, ny, nz = (n - p + 1 for n, p in zip(label.shape, patch))
    if min(nx, ny, nz) < 1:
        raise SamplingError(f"patch {tuple(patch)} larger than volume {label.shape}")
    x0, y0, z0 = np.ogrid[:nx, :ny, :nz]
    x1, y1, z1 = x0 + px, y0 + py, z0 + pz
    counts = (
        table[x1, y1, z1]
        - table[x0, y1, z1]
        - table[x1, y0, z1]
        - table[x1, y1, z0]
        + table[x0, y0, z1]
        + table[x0, y1, z0]
        + table[x1, y0, z0]
        - table[x0, y0, z0]
    )
    return counts > 0


def sample_patch(case: PatientCase, cfg: SamplerConfig, rng: np.random.Generator):
    """Draw one (pet, ct, label) patch.

    With probability ``p_tumor`` the window is drawn uniformly among windows
    containing tumour, otherwise uniformly among all windows. Volumes smaller
    than the patch are padded (PET/label 0, CT -1).
    """
    if case.gtv is None:
        raise SamplingError(f"case {case.case_id} has no ground-truth mask")
    patch = cfg.patch
    pet = _pad_to(case.pet.data, patch, PAD_VALUES["pet"])
    ct = _pad_to(case.ct.data, patch, PAD_VALUES["ct"])
    label = _pad_to(case.gtv.data.astype(np.uint8), patch, PAD_VALUES["label"])

    n_windows = tuple(n - p + 1 for n, p in zip(label.shape, patch))
    use_tumor = rng.random() < cfg.p_tumor
    origin = None
    if use_tumor and label.any():
        candidates = np.flatnonzero(tumor_window_mask(label, patch))
        if candidates.size:
            origin = np.unravel_index(candidates[rng.integers(candidates.size)], n_windows)
    if origin is None:
        origin = tuple(int(rng.integers(n)) for n in n_windows)
    sl = tuple(slice(int(o), int(o) + p) for o, p in zip(origin, patch))
    return pet[sl].copy(), ct[sl].copy(), label[sl].copy()
