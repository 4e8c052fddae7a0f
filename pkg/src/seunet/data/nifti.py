"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only what the pipeline needs: 3-D scalar images, little- or big-endian
input, little-endian output, qform/sform translation as the origin and
``pixdim[1:4]`` as the spacing.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .volume import Volume

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
DEFAULT_VOX_OFFSET = 352

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy type
DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
CODES = {np.dtype(v): k for k, v in DATATYPES.items()}

_TAG = "seunet"


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 file."""


def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _descrip(v: Volume) -> bytes:
    flags = [v.modality] + (["normalized"] if v.normalized else [])
    return f"{_TAG}:{','.join(flags)}".encode()


def parse_header(raw: bytes) -> tuple[np.void, str]:
    """Decode the 348-byte header; returns it with the detected byte order."""
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348")
    if bytes(hdr["magic"]).ljust(4, b"\x00") != MAGIC:
        raise NiftiError(f"bad magic {bytes(hdr['magic'])!r}; only single-file n+1 images are supported")
    return hdr, order


def volume_read(path, modality: str | None = None) -> Volume:
    """Read a NIfTI-1 image, applying scl_slope/scl_inter when set."""
    path = Path(path)
    with _open(path, "rb") as fh:
        raw = fh.read()
    hdr, order = parse_header(raw)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    shape = [int(n) for n in hdr["dim"][1 : ndim + 1]]
    if any(n > 1 for n in shape[3:]):
        raise NiftiError(f"only 3-D images are supported, got dims {shape}")
    shape = (shape + [1, 1, 1])[:3]

    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)
    offset = int(hdr["vox_offset"])
    if offset < DEFAULT_VOX_OFFSET and offset != 0:
        raise NiftiError(f"vox_offset {offset} is inside the header")
    offset = offset or DEFAULT_VOX_OFFSET
    count = int(np.prod(shape))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiError(f"truncated payload: need {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and (slope, inter) != (1.0, 0.0):
        out_type = np.float64 if data.dtype == np.float64 else np.float32
        data = data.astype(out_type) * out_type(slope) + out_type(inter)

    spacing = tuple(abs(float(s)) or 1.0 for s in hdr["pixdim"][1:4])
    if hdr["qform_code"] > 0:
        origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    elif hdr["sform_code"] > 0:
        origin = (float(hdr["srow_x"][3]), float(hdr["srow_y"][3]), float(hdr["srow_z"][3]))
    else:
        origin = (0.0, 0.0, 0.0)

    descrip = bytes(hdr["descrip"]).split(b"\x00")[0].decode("ascii", "replace")
    flags: list[str] = []
    if descrip.startswith(_TAG + ":"):
        flags = descrip.split(":", 1)[1].split(",")
    if modality is None:
        modality = flags[0] if flags and flags[0] in ("PET", "CT", "MASK", "PROB") else ("MASK" if code == 2 else "PET")
    if modality == "MASK":
        data = data.astype(np.uint8)
    return Volume(data, spacing, origin, modality, normalized="normalized" in flags)


def volume_write(v: Volume, path) -> None:
    """Write a single-file NIfTI-1 image (gzip if the name ends in .gz)."""
    path = Path(path)
    data = v.data.astype(np.uint8) if v.modality == "MASK" else v.data
    if data.dtype == bool:
        data = data.astype(np.uint8)
    if data.dtype not in CODES:
        kind = data.dtype.kind
        data = data.astype(np.int16 if kind in "iu" and np.abs(data).max(initial=0) < 2**15 else np.float32)
    data = data.astype(data.dtype.newbyteorder("<"))

    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *v.shape, 1, 1, 1, 1]
    hdr["datatype"] = CODES[data.dtype.newbyteorder("=")]
    hdr["bitpix"] = data.dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *v.spacing, 1.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = DEFAULT_VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = _descrip(v)
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = v.origin
    sx, sy, sz = v.spacing
    hdr["srow_x"] = [sx, 0, 0, v.origin[0]]
    hdr["srow_y"] = [0, sy, 0, v.origin[1]]
    hdr["srow_z"] = [0, 0, sz, v.origin[2]]
    hdr["magic"] = MAGIC

    payload = hdr.tobytes() + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # fixed mtime keeps gzip output byte-identical across runs
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)
