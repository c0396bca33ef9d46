import struct

import numpy as np
import pytest

from sacreg.metrics import jacobian_folding
from sacreg.ops import warp
from sacreg.tensor import ContractError, Tensor
from sacreg.volume_io import (
    DisplacementField,
    Volume,
    VolumeFormatError,
    load_case,
    read_flow,
    read_volume,
    save_case,
    synth_pair,
    synth_translation,
    write_flow,
    write_nifti,
    write_volume,
)


def nifti_bytes(data: np.ndarray, datatype: int, pixdim=(1.0, 1.0, 1.0), slope=1.0, inter=0.0) -> bytes:
    """NIfTI-1 single-file image assembled field by field from the standard's header layout."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)  # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)  # dim
    bitpix = {4: 16, 16: 32}[datatype]
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0.0, 0.0, 0.0, 0.0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, slope)
    struct.pack_into("<f", hdr, 116, inter)
    hdr[344:348] = b"n+1\x00"
    dtype = {4: "<i2", 16: "<f4"}[datatype]
    return bytes(hdr) + b"\x00" * 4 + data.astype(dtype).tobytes(order="F")


def test_native_round_trip_bit_exact(tmp_path, rng):
    vol = Volume(rng.random((8, 8, 8)), spacing=(1.0, 1.5, 2.0))
    write_volume(vol, tmp_path / "v.sacv")
    back = read_volume(tmp_path / "v.sacv")
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == (1.0, 1.5, 2.0) and back.kind == "intensity"


def test_native_label_round_trip(tmp_path):
    lab = Volume(np.arange(24).reshape(2, 3, 4) % 3, kind="label")
    write_volume(lab, tmp_path / "l.sacv")
    back = read_volume(tmp_path / "l.sacv")
    assert back.kind == "label" and np.array_equal(back.data, lab.data)


def test_native_header_layout(tmp_path):
    write_volume(Volume(np.zeros((2, 3, 4)), spacing=(0.5, 1.0, 2.0)), tmp_path / "v.sacv")
    buf = (tmp_path / "v.sacv").read_bytes()
    assert buf[:4] == b"SACV"
    assert struct.unpack_from("<HB3I3f", buf, 4) == (1, 0, 2, 3, 4, 0.5, 1.0, 2.0)
    assert len(buf) == 31 + 4 * 24


def test_flow_round_trip(tmp_path, rng):
    f = DisplacementField(rng.normal(size=(3, 4, 5, 6)))
    write_flow(f, tmp_path / "f.sacv")
    assert np.array_equal(read_flow(tmp_path / "f.sacv").vectors, f.vectors)
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "f.sacv")


def test_flow_rejects_non_finite():
    v = np.zeros((3, 2, 2, 2))
    v[0, 0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        DisplacementField(v)


def test_wrong_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"JUNK" + b"\x00" * 400)
    with pytest.raises(VolumeFormatError, match="unsupported format"):
        read_volume(tmp_path / "x.bin")


def test_truncated_native(tmp_path, rng):
    write_volume(Volume(rng.random((4, 4, 4))), tmp_path / "v.sacv")
    buf = (tmp_path / "v.sacv").read_bytes()
    (tmp_path / "t.sacv").write_bytes(buf[:-10])
    with pytest.raises(VolumeFormatError, match="truncated"):
        read_volume(tmp_path / "t.sacv")


def test_nifti_float32(tmp_path, rng):
    data = rng.normal(size=(4, 5, 6)).astype(np.float32)
    (tmp_path / "a.nii").write_bytes(nifti_bytes(data, 16, pixdim=(1.0, 2.0, 3.0)))
    vol = read_volume(tmp_path / "a.nii")
    expect = (data - data.min()) / (data.max() - data.min())
    np.testing.assert_allclose(vol.data, expect, atol=1e-6)
    assert vol.spacing == (1.0, 2.0, 3.0)


def test_nifti_int16_labels_and_slope(tmp_path):
    data = (np.arange(60).reshape(3, 4, 5) % 4).astype(np.int16)
    (tmp_path / "l.nii").write_bytes(nifti_bytes(data, 4))
    assert np.array_equal(read_volume(tmp_path / "l.nii", kind="label").data, data)
    (tmp_path / "s.nii").write_bytes(nifti_bytes(data, 4, slope=2.0, inter=1.0))
    assert np.array_equal(read_volume(tmp_path / "s.nii", kind="label").data, data * 2 + 1)


def test_nifti_unsupported_datatype(tmp_path):
    buf = bytearray(nifti_bytes(np.zeros((2, 2, 2), np.float32), 16))
    struct.pack_into("<h", buf, 70, 64)  # float64
    (tmp_path / "d.nii").write_bytes(bytes(buf))
    with pytest.raises(VolumeFormatError, match="unsupported NIfTI datatype"):
        read_volume(tmp_path / "d.nii")


def test_nifti_truncated(tmp_path):
    buf = nifti_bytes(np.zeros((4, 4, 4), np.float32), 16)
    (tmp_path / "t.nii").write_bytes(buf[:-8])
    with pytest.raises(VolumeFormatError, match="truncated"):
        read_volume(tmp_path / "t.nii")


def test_nifti_writer_matches_reader(tmp_path, rng):
    vol = Volume(rng.random((3, 4, 5)), spacing=(1.0, 1.0, 2.0))
    write_nifti(vol, tmp_path / "w.nii")
    back = read_volume(tmp_path / "w.nii")
    lo, hi = vol.data.min(), vol.data.max()
    np.testing.assert_allclose(back.data, (vol.data - lo) / (hi - lo), atol=1e-6)


def test_volume_contract():
    with pytest.raises(ContractError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        Volume(np.zeros((2, 2, 2)), kind="mesh")


def test_synth_zero_displacement():
    case = synth_pair(3, size=16, max_disp=0.0)
    assert np.array_equal(case.moving.data, case.fixed.data)
    assert np.array_equal(case.labels_m.data, case.labels_f.data)


def test_synth_deterministic():
    a, b = synth_pair(5, size=16), synth_pair(5, size=16)
    assert np.array_equal(a.moving.data, b.moving.data)
    assert np.array_equal(a.gt_flow.vectors, b.gt_flow.vectors)
    assert np.array_equal(a.labels_f.data, b.labels_f.data)


def test_synth_properties():
    case = synth_pair(0, size=32, max_disp=4.0, smoothness_sigma=6.0)
    norm = case.gt_flow.norm()
    assert norm.max() == pytest.approx(4.0, rel=1e-3)
    assert 0.0 <= case.moving.data.min() and case.moving.data.max() <= 1.0
    labels = np.unique(case.labels_m.data)
    assert 3 <= labels.size <= 5 and labels[0] == 0
    warped = warp(case.moving.as_tensor(), Tensor(case.gt_flow.vectors)).data[0]
    assert np.abs(warped - case.fixed.data).mean() < 0.02
    assert jacobian_folding(case.gt_flow) == 0.0


def test_synth_has_local_contrast_everywhere():
    from scipy.ndimage import uniform_filter

    m = synth_pair(1, size=32).moving.data.astype(np.float64)
    local_var = uniform_filter(m * m, 9) - uniform_filter(m, 9) ** 2
    assert (np.sqrt(np.maximum(local_var, 0)) < 0.01).mean() < 0.01


def test_synth_size_contract():
    with pytest.raises(ContractError):
        synth_pair(0, size=8)
    with pytest.raises(ContractError):
        synth_pair(0, size=16, max_disp=-1.0)


def test_synth_translation_ground_truth():
    case = synth_translation(0, size=16, shift=(2, 0, 0))
    assert np.all(case.gt_flow.vectors[0] == 2) and np.all(case.gt_flow.vectors[1:] == 0)
    assert np.array_equal(case.fixed.data[:-2], case.moving.data[2:])


def test_case_directory_round_trip(tmp_path):
    case = synth_pair(2, size=16)
    save_case(case, tmp_path / "c")
    back = load_case(tmp_path / "c")
    assert np.array_equal(back.moving.data, case.moving.data)
    assert np.array_equal(back.labels_f.data, case.labels_f.data)
    assert np.array_equal(back.gt_flow.vectors, case.gt_flow.vectors)


def test_case_directory_without_labels(tmp_path):
    case = synth_pair(2, size=16)
    write_volume(case.moving, tmp_path / "moving.sacv")
    write_volume(case.fixed, tmp_path / "fixed.sacv")
    back = load_case(tmp_path)
    assert back.labels_m is None and back.gt_flow is None
    (tmp_path / "fixed.sacv").unlink()
    with pytest.raises(VolumeFormatError, match="missing fixed"):
        load_case(tmp_path)
