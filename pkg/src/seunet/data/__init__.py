from .manifest import ManifestEntry, ManifestError, load_cases, read_manifest, save_case, write_manifest
from .nifti import NiftiError, volume_read, volume_write
from .phantom import generate_phantom
from .sampling import SamplerConfig, sample_patch
from .volume import (
    BoundingBox,
    PatientCase,
    Volume,
    crop_bbox,
    ct_normalize,
    pet_zscore,
    preprocess_case,
    resample_isotropic,
)

__all__ = [
    "BoundingBox",
    "ManifestEntry",
    "NiftiError",
    "PatientCase",
    "SamplerConfig",
    "Volume",
    "crop_bbox",
    "ct_normalize",
    "generate_phantom",
    "ManifestError",
    "load_cases",
    "pet_zscore",
    "preprocess_case",
    "read_manifest",
    "resample_isotropic",
    "sample_patch",
    "save_case",
    "volume_read",
    "volume_write",
    "write_manifest",
]
