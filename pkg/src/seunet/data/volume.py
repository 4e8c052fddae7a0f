"""Volumes, patient cases and per-volume preprocessing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..ops import interpolation_weights, resize_axis

MODALITIES = ("PET", "CT", "MASK", "PROB")

CT_WINDOW = (-1024.0, 1024.0)


def _f32(values) -> tuple[float, float, float]:
    # header precision: keeps NIfTI round trips exact
    t = tuple(float(np.float32(v)) for v in values)
    if len(t) != 3:
        raise ValueError(f"expected three values, got {values!r}")
    return t  # type: ignore[return-value]


@dataclass
class Volume:
    data: np.ndarray  # indexed [x, y, z]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    modality: str = "PET"
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.spacing = _f32(self.spacing)
        self.origin = _f32(self.origin)
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if self.modality == "MASK" and not np.isin(self.data, (0, 1)).all():
            raise ValueError("MASK volumes may only contain 0 and 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def same_grid(self, other: Volume) -> bool:
        return self.shape == other.shape and self.spacing == other.spacing and self.origin == other.origin


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel box, start inclusive and stop exclusive."""

    start: tuple[int, int, int]
    stop: tuple[int, int, int]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.start, self.stop)):
            raise ValueError(f"empty bounding box {self.start}..{self.stop}")

    @classmethod
    def full(cls, shape) -> BoundingBox:
        return cls((0, 0, 0), tuple(int(n) for n in shape))  # type: ignore[arg-type]

    @classmethod
    def from_ints(cls, values) -> BoundingBox:
        v = [int(i) for i in values]
        if len(v) != 6:
            raise ValueError(f"bounding box needs six integers, got {values!r}")
        return cls(tuple(v[:3]), tuple(v[3:]))  # type: ignore[arg-type]

    def as_ints(self) -> list[int]:
        return list(self.start) + list(self.stop)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.start, self.stop))  # type: ignore[return-value]

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))  # type: ignore[return-value]

    def within(self, shape) -> bool:
        return all(a >= 0 and b <= n for a, b, n in zip(self.start, self.stop, shape))


@dataclass
class PatientCase:
    case_id: str
    center_id: str
    pet: Volume
    ct: Volume
    gtv: Volume | None = None
    bbox: BoundingBox | None = None

    def __post_init__(self):
        if self.bbox is None:
            self.bbox = BoundingBox.full(self.ct.shape)
        if not self.bbox.within(self.ct.shape):
            raise ValueError(f"bounding box {self.bbox} outside grid {self.ct.shape}")

    def volumes(self) -> list[Volume]:
        return [v for v in (self.pet, self.ct, self.gtv) if v is not None]

    def check_grids(self) -> None:
        ref = self.ct
        for v in self.volumes():
            if v.shape != ref.shape or v.spacing != ref.spacing:
                raise ValueError(f"case {self.case_id}: {v.modality} grid {v.shape}@{v.spacing} != CT {ref.shape}@{ref.spacing}")


def resampled_extent(n: int, spacing: float, target: float) -> int:
    return max(1, int(round(n * spacing / target)))


def resample_isotropic(v: Volume, target: float = 1.0) -> Volume:
    """Resample to ``target`` mm spacing over the same world extent.

    Samples are placed align-corners: output voxel ``j`` along an axis reads
    source coordinate ``j * (n_in - 1) / (n_out - 1)``. Intensities are
    interpolated trilinearly, masks by nearest neighbour.
    """
    if target <= 0 or min(v.spacing) <= 0:
        raise ValueError("spacing must be positive")
    goal = _f32((target,) * 3)
    if v.spacing == goal:
        return replace(v, data=v.data.copy())
    shape = tuple(resampled_extent(n, s, target) for n, s in zip(v.shape, v.spacing))
    if v.modality == "MASK":
        data = v.data
        for axis, n_out in enumerate(shape):
            left, right, frac = interpolation_weights(data.shape[axis], n_out)
            nearest = np.where(frac >= 0.5, right, left)
            data = np.take(data, nearest, axis=axis)
    else:
        data = v.data.astype(np.float32) if v.data.dtype.kind in "iu" else v.data
        for axis, n_out in enumerate(shape):
            data = resize_axis(data, axis, n_out)
    return replace(v, data=np.ascontiguousarray(data), spacing=goal)


def resample_bbox(box: BoundingBox, old_shape, new_shape) -> BoundingBox:
    start, stop = [], []
    for a, b, n_in, n_out in zip(box.start, box.stop, old_shape, new_shape):
        f = (n_out - 1) / (n_in - 1) if n_in > 1 else 0.0
        s = int(np.floor(a * f + 1e-9))
        e = int(np.ceil((b - 1) * f - 1e-9)) + 1
        start.append(min(max(s, 0), n_out - 1))
        stop.append(min(max(e, start[-1] + 1), n_out))
    return BoundingBox(tuple(start), tuple(stop))  # type: ignore[arg-type]


def ct_normalize(v: Volume) -> Volume:
    """Clip to [-1024, 1024] HU and divide by 1024; no-op if already normalized."""
    if v.modality != "CT":
        raise ValueError(f"ct_normalize expects a CT volume, got {v.modality}")
    if v.normalized:
        return replace(v, data=v.data.copy())
    lo, hi = CT_WINDOW
    data = np.clip(v.data.astype(np.float32), lo, hi) / np.float32(hi)
    return replace(v, data=data, normalized=True)


def pet_zscore(values: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Standardize one patch with its own mean and population std."""
    a = np.asarray(values)
    if a.size == 0:
        raise ValueError("cannot z-score an empty patch")
    work = a.astype(np.float64)
    if work.min() == work.max():
        # the mean carries rounding error that the eps floor would amplify
        return np.zeros(a.shape, a.dtype if a.dtype.kind == "f" else np.float32)
    mean = work.mean()
    std = work.std()
    out = (work - mean) / max(std, eps)
    return out.astype(a.dtype if a.dtype.kind == "f" else np.float32)


def crop_bbox(case: PatientCase, box: BoundingBox | None = None) -> PatientCase:
    """Crop every volume of the case to its bounding box (or ``box``)."""
    box = box or case.bbox
    if not box.within(case.ct.shape):
        raise ValueError(f"bounding box {box} outside grid {case.ct.shape}")

    def crop(v: Volume | None) -> Volume | None:
        if v is None:
            return None
        origin = tuple(o + a * s for o, a, s in zip(v.origin, box.start, v.spacing))
        return replace(v, data=v.data[box.slices].copy(), origin=origin)

    return PatientCase(case.case_id, case.center_id, crop(case.pet), crop(case.ct), crop(case.gtv), BoundingBox.full(box.shape))


def preprocess_case(case: PatientCase, target: float = 1.0) -> PatientCase:
    """Resample to isotropic ``target`` mm and normalize CT; idempotent.

    PET keeps raw intensities here; it is z-scored per patch / crop.
    """
    old = case.ct.shape
    pet = resample_isotropic(case.pet, target)
    ct = ct_normalize(resample_isotropic(case.ct, target))
    gtv = None if case.gtv is None else resample_isotropic(case.gtv, target)
    box = case.bbox if ct.shape == old else resample_bbox(case.bbox, old, ct.shape)
    out = PatientCase(case.case_id, case.center_id, pet, ct, gtv, box)
    out.check_grids()
    return out
