import gzip
import struct

import numpy as np
import pytest

from oracles import lerp_world
from seunet.data import (
    BoundingBox,
    ManifestError,
    NiftiError,
    PatientCase,
    SamplerConfig,
    Volume,
    crop_bbox,
    ct_normalize,
    generate_phantom,
    load_cases,
    pet_zscore,
    preprocess_case,
    read_manifest,
    resample_isotropic,
    sample_patch,
    save_case,
    volume_read,
    volume_write,
    write_manifest,
)
from seunet.data.nifti import HEADER_SIZE
from seunet.data.sampling import SamplingError, tumor_window_mask


def assert_same_volume(a: Volume, b: Volume):
    assert a.data.dtype == b.data.dtype
    np.testing.assert_array_equal(a.data, b.data)
    assert (a.spacing, a.origin, a.modality, a.normalized) == (b.spacing, b.origin, b.modality, b.normalized)


# -- NIfTI ------------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.int16, np.float32, np.float64])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_round_trip(tmp_path, dtype, suffix):
    rng = np.random.default_rng(0)
    data = (rng.normal(size=(5, 6, 7)) * 300).astype(dtype)
    v = Volume(data, (0.98, 1.5, 3.27), (-12.5, 4.0, 100.25), "CT")
    volume_write(v, tmp_path / f"v{suffix}")
    assert_same_volume(volume_read(tmp_path / f"v{suffix}"), v)


def test_gzip_and_plain_decode_identically(tmp_path):
    v = generate_phantom(1, 16).pet
    volume_write(v, tmp_path / "a.nii")
    volume_write(v, tmp_path / "a.nii.gz")
    assert_same_volume(volume_read(tmp_path / "a.nii"), volume_read(tmp_path / "a.nii.gz"))
    assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes()) == (tmp_path / "a.nii").read_bytes()


def test_header_layout(tmp_path):
    volume_write(Volume(np.zeros((16, 16, 16), np.int16), modality="CT"), tmp_path / "z.nii")
    raw = (tmp_path / "z.nii").read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack("<f", raw[108:112])[0] == 352.0
    v = volume_read(tmp_path / "z.nii")
    assert v.shape == (16, 16, 16) and not v.data.any()


def test_mask_written_as_uint8(tmp_path):
    m = Volume(np.eye(4, dtype=np.int64)[..., None].repeat(2, axis=2), modality="MASK")
    volume_write(m, tmp_path / "m.nii")
    raw = (tmp_path / "m.nii").read_bytes()
    assert struct.unpack("<h", raw[70:72])[0] == 2
    back = volume_read(tmp_path / "m.nii")
    assert back.modality == "MASK" and back.data.dtype == np.uint8
    np.testing.assert_array_equal(back.data, m.data)


def test_scaling_applied(tmp_path):
    volume_write(Volume(np.full((2, 2, 2), 3, np.int16), modality="CT"), tmp_path / "s.nii")
    raw = bytearray((tmp_path / "s.nii").read_bytes())
    raw[112:116] = struct.pack("<f", 2.0)
    raw[116:120] = struct.pack("<f", 1.0)
    (tmp_path / "s.nii").write_bytes(bytes(raw))
    np.testing.assert_array_equal(volume_read(tmp_path / "s.nii").data, 7.0)


def test_big_endian_input(tmp_path):
    volume_write(Volume(np.arange(8, dtype=np.int16).reshape(2, 2, 2), modality="CT"), tmp_path / "le.nii")
    raw = (tmp_path / "le.nii").read_bytes()
    from seunet.data.nifti import HEADER_DTYPE

    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder("<")).astype(HEADER_DTYPE.newbyteorder(">"))
    payload = np.frombuffer(raw[352:], "<i2").astype(">i2").tobytes()
    (tmp_path / "be.nii").write_bytes(hdr.tobytes() + raw[HEADER_SIZE:352] + payload)
    np.testing.assert_array_equal(volume_read(tmp_path / "be.nii").data, np.arange(8).reshape(2, 2, 2))


def test_nifti_errors(tmp_path):
    volume_write(Volume(np.zeros((4, 4, 4), np.float32)), tmp_path / "ok.nii")
    raw = (tmp_path / "ok.nii").read_bytes()
    cases = {
        "magic.nii": raw[:344] + b"ni1\x00" + raw[348:],
        "short.nii": raw[:200],
        "trunc.nii": raw[:-10],
        "dtype.nii": raw[:70] + struct.pack("<h", 512) + raw[72:],
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(NiftiError):
            volume_read(tmp_path / name)


# -- volumes and preprocessing ----------------------------------------------


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), 2), modality="MASK")
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))


def test_resample_identity_at_target():
    v = generate_phantom(0, 16, spacing=(1, 1, 1)).pet
    out = resample_isotropic(v, 1.0)
    assert out.data is not v.data
    assert_same_volume(out, v)


def test_resample_ramp_world_space():
    v = Volume(np.array([0.0, 2.0], np.float32).reshape(2, 1, 1), spacing=(2.0, 1.0, 1.0))
    out = resample_isotropic(v, 1.0)
    assert out.shape == (4, 1, 1) and out.spacing == (1.0, 1.0, 1.0)
    np.testing.assert_allclose(out.data.ravel(), lerp_world([0, 2], 2.0, 4), atol=1e-6)
    np.testing.assert_allclose(out.data.ravel(), [0, 2 / 3, 4 / 3, 2], atol=1e-6)


def test_resample_profiles_match_world_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n, s = int(rng.integers(2, 9)), float(rng.uniform(0.5, 3.5))
        values = rng.normal(size=n)
        v = Volume(values.reshape(n, 1, 1), spacing=(s, 1, 1))
        out = resample_isotropic(v).data.ravel()
        spacing = float(np.float32(s))
        assert out.size == max(1, round(n * spacing))
        np.testing.assert_allclose(out, lerp_world(values, spacing, out.size), atol=1e-9)


def test_resample_masks_stay_binary():
    case = generate_phantom(2, 32)
    out = resample_isotropic(case.gtv)
    assert set(np.unique(out.data)) <= {0, 1} and out.data.any()
    assert out.modality == "MASK"
    assert out.shape == (31, 31, 105)


def test_resample_rejects_bad_target():
    with pytest.raises(ValueError):
        resample_isotropic(generate_phantom(0, 16).pet, 0.0)


@pytest.mark.parametrize("hu, expected", [(-1024, -1), (1024, 1), (0, 0), (2000, 1), (-3000, -1), (512, 0.5)])
def test_ct_normalize_values(hu, expected):
    out = ct_normalize(Volume(np.full((1, 1, 1), hu, np.int16), modality="CT"))
    assert out.data.item() == expected and out.normalized


def test_ct_normalize_range_and_modality():
    rng = np.random.default_rng(0)
    out = ct_normalize(Volume(rng.normal(scale=2000, size=(8, 8, 8)), modality="CT"))
    assert out.data.min() >= -1 and out.data.max() <= 1
    with pytest.raises(ValueError):
        ct_normalize(generate_phantom(0, 16).pet)


def test_pet_zscore():
    np.testing.assert_allclose(pet_zscore(np.array([1.0, 2.0, 3.0])), [-1.22474487, 0, 1.22474487], atol=1e-8)
    np.testing.assert_array_equal(pet_zscore(np.full((3, 3, 3), 4.2)), 0.0)
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = pet_zscore(rng.gamma(2.0, 3.0, size=(6, 7, 8)).astype(np.float32)).astype(np.float64)
        assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6
    with pytest.raises(ValueError):
        pet_zscore(np.array([]))


def test_preprocess_grids_and_idempotence():
    case = generate_phantom(3, 32)
    once = preprocess_case(case)
    for v in once.volumes():
        assert v.shape == once.ct.shape and v.spacing == (1.0, 1.0, 1.0)
    twice = preprocess_case(once)
    for a, b in zip(once.volumes(), twice.volumes()):
        assert_same_volume(a, b)
    assert twice.bbox == once.bbox


def test_preprocess_resamples_bbox_inside_grid():
    case = generate_phantom(0, 32)
    case.bbox = BoundingBox((4, 4, 4), (28, 28, 20))
    out = preprocess_case(case)
    assert out.bbox.within(out.ct.shape)
    assert out.bbox.shape[2] > case.bbox.shape[2] * 2


# -- bounding boxes -----------------------------------------------------------


def test_crop_bbox():
    case = generate_phantom(0, 32, spacing=(1, 1, 1))
    assert crop_bbox(case).ct.shape == (32, 32, 32)
    np.testing.assert_array_equal(crop_bbox(case).pet.data, case.pet.data)
    box = BoundingBox((0, 0, 0), (16, 16, 16))
    assert crop_bbox(case, box).ct.shape == (16, 16, 16)
    box = BoundingBox((3, 5, 7), (30, 21, 25))
    cropped = crop_bbox(case, box)
    count = sum(case.gtv.data[i, j, k] for i in range(3, 30) for j in range(5, 21) for k in range(7, 25))
    assert int(cropped.gtv.data.sum()) == int(count)
    assert cropped.ct.origin == (3.0, 5.0, 7.0)
    with pytest.raises(ValueError):
        crop_bbox(case, BoundingBox((0, 0, 0), (33, 4, 4)))


def test_bbox_validation():
    with pytest.raises(ValueError):
        BoundingBox((2, 0, 0), (2, 4, 4))
    assert BoundingBox.from_ints([1, 2, 3, 4, 5, 6]).shape == (3, 3, 3)
    with pytest.raises(ValueError):
        PatientCase("a", "c", Volume(np.zeros((4, 4, 4))), Volume(np.zeros((4, 4, 4)), modality="CT"), bbox=BoundingBox((0, 0, 0), (5, 4, 4)))


# -- phantom -------------------------------------------------------------------


def test_phantom_deterministic():
    a, b = generate_phantom(11, 32), generate_phantom(11, 32)
    for x, y in zip(a.volumes(), b.volumes()):
        assert_same_volume(x, y)
    assert not np.array_equal(a.pet.data, generate_phantom(12, 32).pet.data)


def test_phantom_contents():
    for seed in range(10):
        case = generate_phantom(seed, 32)
        assert case.gtv.data.any()
        inside = case.pet.data[case.gtv.data == 1].mean()
        outside = case.pet.data[case.gtv.data == 0].mean()
        assert inside > 3 * outside
        tissue = case.ct.data[(case.ct.data > -1000) & (case.ct.data < 700)]
        assert tissue.min() >= -200 and tissue.max() <= 200
    assert case.ct.spacing == tuple(float(np.float32(s)) for s in (0.98, 0.98, 3.27))
    assert not generate_phantom(0, 16, n_lesions=0).gtv.data.any()
    with pytest.raises(ValueError):
        generate_phantom(0, 24)


# -- sampling --------------------------------------------------------------------


def processed(seed=0, extent=32):
    return preprocess_case(generate_phantom(seed, extent, spacing=(1, 1, 1)))


def test_patch_shapes_and_binary_labels():
    case = processed()
    rng = np.random.default_rng(0)
    cfg = SamplerConfig((16, 16, 16))
    for _ in range(20):
        pet, ct, label = sample_patch(case, cfg, rng)
        assert pet.shape == ct.shape == label.shape == (16, 16, 16)
        assert set(np.unique(label)) <= {0, 1}


def test_whole_volume_patch():
    case = processed()
    pet, ct, label = sample_patch(case, SamplerConfig((32, 32, 32)), np.random.default_rng(0))
    np.testing.assert_array_equal(pet, case.pet.data)
    np.testing.assert_array_equal(ct, case.ct.data)


def test_small_volume_is_padded():
    case = processed(extent=16)
    pet, ct, label = sample_patch(case, SamplerConfig((32, 32, 32)), np.random.default_rng(0))
    assert pet.shape == (32, 32, 32)
    assert ct[0, 0, 0] == -1.0 and pet[0, 0, 0] == 0.0 and label[0, 0, 0] == 0
    np.testing.assert_array_equal(ct[8:24, 8:24, 8:24], case.ct.data)


def test_tumor_free_case_uses_uniform_windows():
    case = preprocess_case(generate_phantom(0, 32, n_lesions=0, spacing=(1, 1, 1)))
    cfg = SamplerConfig((16, 16, 16), p_tumor=1.0)
    for seed in range(5):
        assert sample_patch(case, cfg, np.random.default_rng(seed))[2].shape == (16, 16, 16)


def test_sampler_requires_mask():
    case = processed()
    case.gtv = None
    with pytest.raises(SamplingError):
        sample_patch(case, SamplerConfig((16, 16, 16)), np.random.default_rng(0))


def test_tumor_window_mask_brute_force():
    rng = np.random.default_rng(5)
    label = (rng.random((7, 6, 5)) < 0.03).astype(np.uint8)
    patch = (3, 2, 4)
    got = tumor_window_mask(label, patch)
    for idx in np.ndindex(got.shape):
        window = label[idx[0] : idx[0] + 3, idx[1] : idx[1] + 2, idx[2] : idx[2] + 4]
        assert got[idx] == bool(window.any())


def test_sampler_config_validation():
    for kw in (dict(patch=(20, 16, 16)), dict(p_tumor=1.5)):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


# -- manifest -----------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    cases = [generate_phantom(s, 16) for s in range(3)]
    cases[1].bbox = BoundingBox((1, 2, 3), (15, 14, 13))
    entries = [save_case(c, tmp_path / "vol") for c in cases]
    entries[2].gtv = None
    write_manifest(entries, tmp_path / "manifest.csv")
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "case_id,center_id,pet,ct,gtv,x0,y0,z0,x1,y1,z1"
    assert lines[2].endswith(",1,2,3,15,14,13")
    back = read_manifest(tmp_path / "manifest.csv")
    assert [e.bbox for e in back] == [c.bbox for c in cases]
    loaded = load_cases(tmp_path / "manifest.csv")
    assert loaded[2].gtv is None
    assert_same_volume(loaded[0].pet, cases[0].pet)
    assert_same_volume(loaded[1].gtv, cases[1].gtv)
    assert loaded[0].center_id == cases[0].center_id


def test_manifest_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,pet\nx,y\n")
    with pytest.raises(ManifestError):
        read_manifest(bad)
    header = "case_id,center_id,pet,ct,gtv,x0,y0,z0,x1,y1,z1\n"
    bad.write_text(header + "a,c,p,q,,0,0,0,4,4\n")
    with pytest.raises(ManifestError):
        read_manifest(bad)
    bad.write_text(header + "a,c,p,q,,0,0,0,4,4,4\na,c,p,q,,0,0,0,4,4,4\n")
    with pytest.raises(ManifestError, match="duplicate"):
        read_manifest(bad)
