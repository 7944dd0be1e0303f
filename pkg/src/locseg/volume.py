"""Volumetric data model: 3D grids with physical spacing, PET/CT cases,
location cues, a dependency-free NIfTI-1 subset, intensity windowing,
slice/stack geometry and patch/tiling arithmetic.

The NIfTI subset is deliberately narrow: uncompressed single-file ``.nii``,
little-endian, float32 or uint8, 348-byte header with data at offset 352.
Orientation fields are echoed on write but never interpreted; phantom data
is axis-aligned by construction.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MODALITIES",
    "Volume",
    "Case",
    "LocationCue",
    "NiftiFormatError",
    "NiftiUnsupportedError",
    "read_nifti",
    "write_nifti",
    "window_scale",
    "slice_stack",
    "stack_to_cue",
    "extract_patch",
    "tile_positions",
]

MODALITIES = ("CT", "PET", "MASK", "PROB")


@dataclass
class Volume:
    """3D scalar grid with voxel spacing in mm and a modality tag."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: str

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality == "MASK":
            if arr.dtype != np.uint8:
                vals = np.unique(arr)
                if not np.isin(vals, (0, 1)).all():
                    raise ValueError("MASK volumes must contain only {0, 1}")
                arr = arr.astype(np.uint8)
            elif not np.isin(np.unique(arr), (0, 1)).all():
                raise ValueError("MASK volumes must contain only {0, 1}")
        else:
            arr = arr.astype(np.float32, copy=False)
            if self.modality == "PROB":
                if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                    raise ValueError("PROB volumes must lie in [0, 1]")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume_mm3(self) -> float:
        s0, s1, s2 = self.spacing
        return s0 * s1 * s2

    def copy(self, data: np.ndarray | None = None, modality: str | None = None) -> "Volume":
        return Volume(self.data.copy() if data is None else data,
                      self.spacing, modality or self.modality)


@dataclass
class Case:
    """One subject: aligned CT + PET and, when labeled, a ground-truth mask."""

    id: str
    ct: Volume
    pet: Volume
    label: Volume | None = None

    def __post_init__(self):
        if self.ct.modality != "CT" or self.pet.modality != "PET":
            raise ValueError("case requires ct with modality CT and pet with modality PET")
        for name, vol in (("pet", self.pet), ("label", self.label)):
            if vol is None:
                continue
            if vol.shape != self.ct.shape or vol.spacing != self.ct.spacing:
                raise ValueError(
                    f"case {self.id!r}: {name} grid {vol.shape}/{vol.spacing} does not "
                    f"match ct {self.ct.shape}/{self.ct.spacing}")
        if self.label is not None and self.label.modality != "MASK":
            raise ValueError("case label must have modality MASK")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.ct.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.ct.spacing


@dataclass
class LocationCue:
    """Voxel-wise lesion probability produced by the 2D localization stage."""

    cue: Volume

    def __post_init__(self):
        if self.cue.modality != "PROB":
            raise ValueError("location cue must be a PROB volume")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.cue.shape

    @property
    def data(self) -> np.ndarray:
        return self.cue.data

    def check_aligned(self, case: Case) -> None:
        if self.cue.shape != case.shape or self.cue.spacing != case.spacing:
            raise ValueError(
                f"cue grid {self.cue.shape}/{self.cue.spacing} misaligned with case "
                f"{case.id!r} {case.shape}/{case.spacing}")


# ---------------------------------------------------------------------------
# NIfTI-1 subset

class NiftiFormatError(ValueError):
    """File is not a NIfTI-1 volume this package can parse."""


class NiftiUnsupportedError(NiftiFormatError):
    """Valid NIfTI-1, but uses a feature outside the supported subset."""


# (struct code, field name); numeric codes for the 1-byte char fields
_HDR_FIELDS = [
    ("i", "sizeof_hdr"), ("10s", "data_type"), ("18s", "db_name"),
    ("i", "extents"), ("h", "session_error"), ("b", "regular"),
    ("b", "dim_info"), ("8h", "dim"), ("3f", "intent_p"),
    ("h", "intent_code"), ("h", "datatype"), ("h", "bitpix"),
    ("h", "slice_start"), ("8f", "pixdim"), ("f", "vox_offset"),
    ("f", "scl_slope"), ("f", "scl_inter"), ("h", "slice_end"),
    ("b", "slice_code"), ("b", "xyzt_units"), ("f", "cal_max"),
    ("f", "cal_min"), ("f", "slice_duration"), ("f", "toffset"),
    ("i", "glmax"), ("i", "glmin"), ("80s", "descrip"), ("24s", "aux_file"),
    ("h", "qform_code"), ("h", "sform_code"), ("6f", "quatern"),
    ("12f", "srow"), ("16s", "intent_name"), ("4s", "magic"),
]
_HDR = struct.Struct("<" + "".join(code for code, _ in _HDR_FIELDS))
assert _HDR.size == 348


def _unpack_header(raw: bytes) -> dict:
    values = _HDR.unpack_from(raw, 0)
    out, i = {}, 0
    for code, name in _HDR_FIELDS:
        n = 1 if code[0].isalpha() or code.endswith("s") else int(code[:-1])
        out[name] = values[i] if n == 1 else values[i:i + n]
        i += n
    return out


_DT_UINT8 = 2
_DT_FLOAT32 = 16
_VOX_OFFSET = 352


def write_nifti(volume: Volume, path) -> None:
    """Write a single-file little-endian ``.nii``; MASK as uint8, rest float32.

    The modality tag rides in ``intent_name`` so files written here round-trip
    without external bookkeeping.
    """
    if volume.modality == "MASK":
        datatype, bitpix = _DT_UINT8, 8
        payload = volume.data.astype(np.uint8, copy=False)
    else:
        datatype, bitpix = _DT_FLOAT32, 32
        payload = volume.data.astype(np.float32, copy=False)
    d0, d1, d2 = volume.shape
    s0, s1, s2 = volume.spacing
    values = {
        "sizeof_hdr": 348, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": ord("r"), "dim_info": 0,
        "dim": (3, d0, d1, d2, 1, 1, 1, 1), "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0, "datatype": datatype, "bitpix": bitpix,
        "slice_start": 0, "pixdim": (1.0, s0, s1, s2, 0.0, 0.0, 0.0, 0.0),
        "vox_offset": float(_VOX_OFFSET), "scl_slope": 0.0, "scl_inter": 0.0,
        "slice_end": 0, "slice_code": 0, "xyzt_units": 2,  # mm
        "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0, "toffset": 0.0,
        "glmax": 0, "glmin": 0, "descrip": b"locseg", "aux_file": b"",
        "qform_code": 0, "sform_code": 1,
        "quatern": (0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        "srow": (s0, 0.0, 0.0, 0.0, 0.0, s1, 0.0, 0.0, 0.0, 0.0, s2, 0.0),
        "intent_name": volume.modality.encode("ascii"), "magic": b"n+1\0",
    }
    flat = []
    for code, name in _HDR_FIELDS:
        v = values[name]
        flat.extend(v) if isinstance(v, tuple) else flat.append(v)
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(*flat))
        fh.write(b"\0\0\0\0")  # extension flag; data starts at vox_offset 352
        fh.write(np.asfortranarray(payload).tobytes(order="F"))


def read_nifti(path, modality: str | None = None) -> Volume:
    """Read the supported NIfTI-1 subset back into a :class:`Volume`.

    ``modality`` overrides the tag recovered from ``intent_name``; files
    written elsewhere fall back to MASK for uint8 and CT for float32.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) >= 2 and raw[:2] == b"\x1f\x8b":
        raise NiftiUnsupportedError(
            f"{path}: gzip-compressed input is not supported (field: magic)")
    if len(raw) < _HDR.size:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = _unpack_header(raw)
    if hdr["sizeof_hdr"] != 348:
        if hdr["sizeof_hdr"] == 1543569408:  # 348 byte-swapped
            raise NiftiUnsupportedError(
                f"{path}: big-endian files are not supported (field: sizeof_hdr)")
        raise NiftiFormatError(
            f"{path}: sizeof_hdr is {hdr['sizeof_hdr']}, expected 348")
    if hdr["magic"] != b"n+1\0":
        raise NiftiFormatError(
            f"{path}: bad magic {hdr['magic']!r}, expected b'n+1\\x00'")
    dim = hdr["dim"]
    if dim[0] < 3 or any(e != 1 for e in dim[4:dim[0] + 1]):
        raise NiftiUnsupportedError(
            f"{path}: only 3D volumes are supported (field: dim={list(dim)})")
    shape = tuple(int(e) for e in dim[1:4])
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    vox_offset = int(hdr["vox_offset"])
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    intent_name = hdr["intent_name"].rstrip(b"\0").decode("ascii", errors="replace")

    if hdr["datatype"] == _DT_FLOAT32:
        dtype = np.dtype("<f4")
    elif hdr["datatype"] == _DT_UINT8:
        dtype = np.dtype("u1")
    else:
        raise NiftiUnsupportedError(
            f"{path}: datatype code {hdr['datatype']} outside supported subset "
            f"{{2 (uint8), 16 (float32)}} (field: datatype)")

    count = int(np.prod(shape))
    if len(raw) < vox_offset + count * dtype.itemsize:
        raise NiftiFormatError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").copy()
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data.astype(np.float32) * slope + inter

    if modality is None:
        if intent_name in MODALITIES:
            modality = intent_name
        else:
            modality = "MASK" if dtype.kind == "u" else "CT"
    return Volume(data, spacing, modality)


# ---------------------------------------------------------------------------
# geometry


def window_scale(volume: Volume, lo: float, hi: float) -> Volume:
    """Clip to [lo, hi] and rescale linearly onto [0, 1]."""
    if hi <= lo:
        raise ValueError(f"window requires hi > lo, got ({lo}, {hi})")
    scaled = np.clip((volume.data.astype(np.float32) - lo) / (hi - lo), 0.0, 1.0)
    return Volume(scaled, volume.spacing, volume.modality)


def slice_stack(volume: Volume, axis: int) -> list[np.ndarray]:
    """Split into 2D sections of increasing index along ``axis``."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    moved = np.moveaxis(volume.data, axis, 0)
    return [np.ascontiguousarray(moved[k]) for k in range(moved.shape[0])]


def stack_to_cue(slices, axis: int, spacing: tuple[float, float, float]) -> LocationCue:
    """Reassemble per-slice probabilities into an aligned PROB volume."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    slices = [np.asarray(s, dtype=np.float32) for s in slices]
    if not slices:
        raise ValueError("cannot stack an empty slice list")
    first = slices[0].shape
    ragged = [i for i, s in enumerate(slices) if s.shape != first]
    if ragged:
        raise ValueError(f"ragged slices at indices {ragged}: expected shape {first}")
    data = np.stack(slices, axis=axis)
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("cue slices must lie in [0, 1]")
    return LocationCue(Volume(data, spacing, "PROB"))


def extract_patch(volume: Volume, origin: tuple[int, int, int],
                  size: tuple[int, int, int]) -> Volume:
    """Copy the contiguous sub-volume at ``origin`` of extent ``size``."""
    for ax in range(3):
        if origin[ax] < 0 or origin[ax] + size[ax] > volume.shape[ax]:
            raise ValueError(
                f"patch out of bounds on axis {ax}: origin {origin[ax]} + size "
                f"{size[ax]} exceeds extent {volume.shape[ax]}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return Volume(volume.data[sl].copy(), volume.spacing, volume.modality)


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if origins[-1] != last:
        origins.append(last)
    return origins


def tile_positions(shape, patch, stride) -> list[tuple[int, int, int]]:
    """Sliding-window origins covering the whole grid.

    Per axis the windows start at 0, stride, 2*stride, ... with a final
    origin clamped to extent - patch so the last window touches the boundary.
    """
    shape, patch, stride = tuple(shape), tuple(patch), tuple(stride)
    for ax in range(len(shape)):
        if patch[ax] > shape[ax]:
            raise ValueError(
                f"patch {patch[ax]} exceeds extent {shape[ax]} on axis {ax}; "
                "pad the volume before tiling")
        if not 1 <= stride[ax] <= patch[ax]:
            raise ValueError(
                f"stride must be in [1, patch] on axis {ax}, got {stride[ax]}")
    per_axis = [_axis_origins(shape[ax], patch[ax], stride[ax]) for ax in range(len(shape))]
    return sorted(itertools.product(*per_axis))
