"""Volume containers, the native ``.sacv`` file format, a minimal NIfTI-1 reader
and a synthetic registration-pair generator with known deformation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .ops import warp, warp_nearest
from .tensor import ContractError, Tensor, no_grad

MAGIC = b"SACV"
VERSION = 1
KINDS = {"intensity": 0, "label": 1, "flow": 2}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_HEADER = struct.Struct("<4sHB3I3f")

NIFTI_INT16 = 4
NIFTI_FLOAT32 = 16


class VolumeFormatError(IOError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        if self.kind not in ("intensity", "label"):
            raise ContractError(f"unknown volume kind {self.kind!r}")
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ContractError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def as_tensor(self) -> Tensor:
        """Single-channel [1, D, H, W] tensor view of the intensities."""
        return Tensor(self.data[None])


@dataclass
class DisplacementField:
    """Voxel-unit displacements [3, D, H, W] ordered (d, h, w); ``scale`` is the pyramid level."""

    vectors: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 4 or self.vectors.shape[0] != 3:
            raise ContractError(f"displacement field must be [3, D, H, W], got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("displacement field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.vectors.shape[1:]

    def norm(self) -> np.ndarray:
        return np.sqrt((self.vectors.astype(np.float64) ** 2).sum(axis=0))


@dataclass
class SyntheticCase:
    moving: Volume
    fixed: Volume
    gt_flow: DisplacementField
    labels_m: Volume
    labels_f: Volume
    meta: dict = field(default_factory=dict)


# -- native format ---------------------------------------------------------


def _write_native(path, kind: str, extents, spacing, payload: np.ndarray) -> None:
    header = _HEADER.pack(MAGIC, VERSION, KINDS[kind], *extents, *spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read_native(buf: bytes, path):
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, kind, d, h, w, sd, sh, sw = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    if kind not in _KIND_NAMES:
        raise VolumeFormatError(f"{path}: unknown volume kind code {kind}")
    channels = 3 if _KIND_NAMES[kind] == "flow" else 1
    count = channels * d * h * w
    body = buf[_HEADER.size :]
    if len(body) < 4 * count:
        raise VolumeFormatError(f"{path}: truncated data ({len(body)} of {4 * count} bytes)")
    arr = np.frombuffer(body, dtype="<f4", count=count).astype(np.float32)
    shape = (channels, d, h, w) if channels == 3 else (d, h, w)
    return _KIND_NAMES[kind], arr.reshape(shape), (sd, sh, sw)


def write_volume(volume: Volume, path) -> None:
    _write_native(path, volume.kind, volume.shape, volume.spacing, volume.data)


def write_flow(flow: DisplacementField, path, spacing=(1.0, 1.0, 1.0)) -> None:
    _write_native(path, "flow", flow.shape, spacing, flow.vectors)


def read_flow(path) -> DisplacementField:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: unsupported format")
    kind, arr, _ = _read_native(buf, path)
    if kind != "flow":
        raise VolumeFormatError(f"{path}: holds a {kind} volume, not a displacement field")
    return DisplacementField(arr)


# -- NIfTI-1 ---------------------------------------------------------------


def _read_nifti(buf: bytes, path, kind: str | None) -> Volume:
    if len(buf) < 348:
        raise VolumeFormatError(f"{path}: truncated NIfTI header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", buf, 0)[0] == 348:
            break
    else:
        raise VolumeFormatError(f"{path}: unsupported format")
    if buf[344:348] != b"n+1\x00":
        raise VolumeFormatError(f"{path}: unsupported format (only single-file n+1 NIfTI is read)")
    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset = int(struct.unpack_from(endian + "f", buf, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", buf, 112)
    ndim = dim[0]
    if ndim < 3 or any(n != 1 for n in dim[4 : ndim + 1]):
        raise VolumeFormatError(f"{path}: expected a 3D volume, got dim={dim[: ndim + 1]}")
    if datatype == NIFTI_INT16:
        dtype = np.dtype(endian + "i2")
    elif datatype == NIFTI_FLOAT32:
        dtype = np.dtype(endian + "f4")
    else:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    shape = tuple(int(n) for n in dim[1:4])
    count = int(np.prod(shape))
    if len(buf) < vox_offset + count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: truncated data")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=vox_offset).astype(np.float32)
    arr = arr.reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope or 1.0) + inter
    kind = kind or "intensity"
    if kind == "intensity":
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return Volume(np.ascontiguousarray(arr), spacing, kind)


def read_volume(path, kind: str | None = None) -> Volume:
    """Read a native ``.sacv`` volume or an uncompressed NIfTI-1 file.

    NIfTI intensities are min-max normalised to [0, 1]; native files are returned as stored.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise VolumeFormatError(f"{path}: no such file") from None
    if buf[:4] == MAGIC:
        stored, arr, spacing = _read_native(buf, path)
        if stored == "flow":
            raise VolumeFormatError(f"{path}: holds a displacement field, use read_flow")
        return Volume(arr, spacing, stored)
    return _read_nifti(buf, path, kind)


def write_nifti(volume: Volume, path, datatype: int = NIFTI_FLOAT32) -> None:
    """Minimal single-file NIfTI-1 writer (used to produce interchange test files)."""
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *volume.shape, 1, 1, 1, 1)
    bitpix = 16 if datatype == NIFTI_INT16 else 32
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    dtype = "<i2" if datatype == NIFTI_INT16 else "<f4"
    data = np.asarray(volume.data).astype(dtype).ravel(order="F")
    Path(path).write_bytes(bytes(hdr) + data.tobytes())


# -- synthetic pairs -------------------------------------------------------


def _as_size(size) -> tuple[int, int, int]:
    if np.isscalar(size):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ContractError(f"synthetic size must be >= 16 per axis, got {size}")
    return size


def _blob_texture(rng: np.random.Generator, size, n_blobs: int = 20) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in size], indexing="ij")
    img = np.zeros(size)
    scale = min(size)
    for _ in range(n_blobs):
        centre = [rng.uniform(0, n) for n in size]
        sigma = rng.uniform(0.06, 0.16) * scale
        amp = rng.uniform(0.3, 1.0)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
        img += amp * np.exp(-r2 / (2 * sigma**2))
    return np.clip(img, 0.0, 1.0)


def _label_regions(rng: np.random.Generator, size) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in size], indexing="ij")
    labels = np.zeros(size, dtype=np.float32)
    scale = min(size)
    for code in range(1, int(rng.integers(2, 5)) + 1):
        centre = [rng.uniform(0.3 * n, 0.7 * n) for n in size]
        radii = [rng.uniform(0.1, 0.2) * scale for _ in size]
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii)) <= 1.0
        labels[inside] = code
    return labels


def _detail_texture(rng: np.random.Generator, size, sigma: float = 1.5) -> np.ndarray:
    noise = gaussian_filter(rng.normal(size=size), sigma, mode="wrap")
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo) if hi > lo else np.zeros(size)


def _base_volume(rng: np.random.Generator, size) -> tuple[np.ndarray, np.ndarray]:
    """Textured intensity volume and its label grid.

    Blobs alone leave flat stretches where local NCC carries no signal, so a
    faint fine-grained texture is mixed in; each label region also gets its own
    intensity offset so its boundary is visible.
    """
    blobs = _blob_texture(rng, size)
    labels = _label_regions(rng, size)
    detail = _detail_texture(rng, size)
    base = 0.7 * (0.75 * blobs + 0.25 * labels / max(labels.max(), 1.0)) + 0.3 * detail
    return np.clip(base, 0.0, 1.0).astype(np.float32), labels


def synth_pair(seed: int, size=48, max_disp: float = 4.0, smoothness_sigma: float = 6.0) -> SyntheticCase:
    """Random textured volume, 2-4 ellipsoid labels and a smooth ground-truth field.

    The moving image is the textured base; the fixed image is the base warped by
    ``gt_flow``, so ``warp(moving, gt_flow) == fixed``. Labels follow the same
    mapping with nearest-neighbour sampling.
    """
    if max_disp < 0:
        raise ContractError("max_disp must be >= 0")
    size = _as_size(size)
    rng = np.random.default_rng(seed)
    base, labels = _base_volume(rng, size)
    noise = rng.normal(size=(3, *size))
    field_ = np.stack([gaussian_filter(c, smoothness_sigma, mode="wrap") for c in noise])
    peak = np.sqrt((field_**2).sum(axis=0)).max()
    if max_disp == 0 or peak == 0:
        field_ = np.zeros_like(field_)
    else:
        field_ *= max_disp / peak
    flow = DisplacementField(field_)
    moving = base.astype(np.float32)
    with no_grad():
        fixed = warp(Tensor(moving[None].astype(np.float64)), Tensor(flow.vectors.astype(np.float64))).data[0]
    return SyntheticCase(
        moving=Volume(moving, kind="intensity"),
        fixed=Volume(fixed.astype(np.float32), kind="intensity"),
        gt_flow=flow,
        labels_m=Volume(labels, kind="label"),
        labels_f=Volume(warp_nearest(labels, flow.vectors), kind="label"),
        meta={"seed": seed, "size": size, "max_disp": max_disp, "smoothness_sigma": smoothness_sigma},
    )


def synth_translation(seed: int, size=32, shift=(2, 0, 0)) -> SyntheticCase:
    """Synthetic case whose ground truth is a constant integer translation."""
    size = _as_size(size)
    rng = np.random.default_rng(seed)
    base, labels = _base_volume(rng, size)
    vec = np.zeros((3, *size), dtype=np.float32)
    for a in range(3):
        vec[a] = shift[a]
    flow = DisplacementField(vec)
    with no_grad():
        fixed = warp(Tensor(base[None].astype(np.float64)), Tensor(vec.astype(np.float64))).data[0]
    return SyntheticCase(
        moving=Volume(base),
        fixed=Volume(fixed.astype(np.float32)),
        gt_flow=flow,
        labels_m=Volume(labels, kind="label"),
        labels_f=Volume(warp_nearest(labels, vec), kind="label"),
        meta={"seed": seed, "size": size, "shift": tuple(shift)},
    )


CASE_FILES = ("moving", "fixed", "labels_m", "labels_f")


def save_case(case: SyntheticCase, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in CASE_FILES:
        write_volume(getattr(case, name), directory / f"{name}.sacv")
    write_flow(case.gt_flow, directory / "gt_flow.sacv")


def load_case(directory) -> SyntheticCase:
    """Load a case directory; labels and ``gt_flow`` are optional (None when absent)."""
    directory = Path(directory)
    parts = {}
    for name in CASE_FILES:
        p = directory / f"{name}.sacv"
        if not p.exists():
            p = directory / f"{name}.nii"
        if p.exists():
            parts[name] = read_volume(p, kind="label" if name.startswith("labels") else "intensity")
        elif name in ("moving", "fixed"):
            raise VolumeFormatError(f"case {directory.name}: missing {name} volume")
        else:
            parts[name] = None
    gt = directory / "gt_flow.sacv"
    return SyntheticCase(gt_flow=read_flow(gt) if gt.exists() else None, meta={"case_id": directory.name}, **parts)
