"""Volumetric grid types and MetaImage (.mhd/.raw) I/O.

Arrays are stored C-ordered with shape ``(nz, ny, nx)`` so that x varies
fastest in memory, which is also the MetaImage payload order.  ``dims`` and
``spacing`` are always reported in ``(x, y, z)`` order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORGAN_LABELS = {1: "liver", 2: "spleen", 3: "r_kidney", 4: "l_kidney"}
MAX_LABEL = 4

_HEADER_ORDER = (
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "ElementType",
    "ElementDataFile",
)
# Keys other writers commonly emit; accepted on read and ignored.
_TOLERATED_KEYS = {
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ByteOrderMSB",
    "CompressedData",
    "Offset",
    "Origin",
    "Position",
    "TransformMatrix",
    "Rotation",
    "Orientation",
    "CenterOfRotation",
    "AnatomicalOrientation",
    "ElementNumberOfChannels",
    "Comment",
    "ObjectSubType",
    "Name",
}
_ELEMENT_TYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
}


class MetaImageError(ValueError):
    """Raised for malformed or unsupported MetaImage files."""


def _check_geometry(dims, spacing, shape):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or len(spacing) != 3:
        raise ValueError("dims and spacing must have three entries")
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be strictly positive, got {spacing}")
    if tuple(shape) != dims[::-1]:
        raise ValueError(f"array shape {tuple(shape)} does not match dims {dims} (expected (nz, ny, nx))")
    return dims, spacing


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar field in HU (or normalized units)."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = _frozen(self.values, np.float32)
        if values.ndim != 3:
            raise ValueError("Volume values must be 3-D (nz, ny, nx)")
        _, spacing = _check_geometry(values.shape[::-1], self.spacing, values.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("Volume values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.values.shape[::-1]

    @property
    def voxel_count(self):
        return int(self.values.size)

    def with_values(self, values):
        return type(self)(values, self.spacing)

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume):
    """Organ label grid: 0 background, 1 liver, 2 spleen, 3 right kidney, 4 left kidney."""

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 3:
            raise ValueError("LabelVolume values must be 3-D (nz, ny, nx)")
        if raw.size and (np.any(raw < 0) or np.any(raw > MAX_LABEL)):
            raise ValueError(f"labels must lie in 0..{MAX_LABEL}")
        if not np.array_equal(raw, np.round(raw)):
            raise ValueError("labels must be integers")
        values = _frozen(raw, np.uint8)
        _, spacing = _check_geometry(values.shape[::-1], self.spacing, values.shape)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)


@dataclass(frozen=True, eq=False)
class MaskVolume(Volume):
    """Binary grid."""

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 3:
            raise ValueError("MaskVolume values must be 3-D (nz, ny, nx)")
        if raw.dtype != bool and raw.size and not np.all((raw == 0) | (raw == 1)):
            raise ValueError("mask values must be 0/1")
        values = _frozen(raw, bool)
        _, spacing = _check_geometry(values.shape[::-1], self.spacing, values.shape)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)


@dataclass(frozen=True)
class DectPair:
    """Co-registered low-kV / high-kV acquisition of one case."""

    low: Volume
    high: Volume
    identifier: str = "case"

    def __post_init__(self):
        if type(self.low) is not Volume or type(self.high) is not Volume:
            raise TypeError("DectPair members must be scalar Volumes")
        if self.low.dims != self.high.dims:
            raise ValueError(f"low/high dims differ: {self.low.dims} vs {self.high.dims}")
        if self.low.spacing != self.high.spacing:
            raise ValueError(f"low/high spacing differ: {self.low.spacing} vs {self.high.spacing}")

    @property
    def dims(self):
        return self.low.dims

    @property
    def spacing(self):
        return self.low.spacing


def volume_stats(volume):
    """Return ``(min, max, mean, voxel_count)`` over all voxels."""
    v = volume.values
    return (
        float(v.min()),
        float(v.max()),
        float(v.mean(dtype=np.float64)),
        int(v.size),
    )


def write_metaimage(volume, path):
    """Write ``volume`` as ``<path>`` (.mhd header) plus a sibling .raw payload."""
    path = Path(path)
    if path.suffix.lower() != ".mhd":
        path = path.with_suffix(".mhd")
    raw_path = path.with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(volume, (LabelVolume, MaskVolume)):
        etype, payload = "MET_UCHAR", volume.values.astype(np.uint8)
    elif isinstance(volume, Volume):
        etype, payload = "MET_FLOAT", volume.values.astype("<f4")
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    fields = {
        "ObjectType": "Image",
        "NDims": "3",
        "DimSize": " ".join(str(d) for d in volume.dims),
        "ElementSpacing": " ".join(repr(float(s)) for s in volume.spacing),
        "ElementType": etype,
        "ElementDataFile": raw_path.name,
    }
    header = "".join(f"{k} = {fields[k]}\n" for k in _HEADER_ORDER)
    with open(raw_path, "wb") as fh:
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header)
    return path


def _parse_header(path):
    fields = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise MetaImageError(f"{path}:{lineno}: expected 'Key = Value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _HEADER_ORDER and key not in _TOLERATED_KEYS:
                raise MetaImageError(f"{path}:{lineno}: unknown header key {key!r}")
            fields[key] = value
    missing = [k for k in ("NDims", "DimSize", "ElementType", "ElementDataFile") if k not in fields]
    if missing:
        raise MetaImageError(f"{path}: missing header key(s) {missing}")
    return fields


def read_metaimage(path, kind=None):
    """Read a MetaImage file.

    ``kind`` selects the returned type for byte payloads: ``"labels"``
    (default for MET_UCHAR) or ``"mask"``.  Float payloads always give a
    :class:`Volume`.
    """
    path = Path(path)
    fields = _parse_header(path)
    if fields.get("CompressedData", "False").lower() == "true":
        raise MetaImageError("compressed payloads are not supported")
    if fields.get("ElementNumberOfChannels", "1") != "1":
        raise MetaImageError("multi-channel payloads are not supported")
    if int(fields["NDims"]) != 3:
        raise MetaImageError(f"only 3-D images are supported, NDims = {fields['NDims']}")
    try:
        dims = tuple(int(t) for t in fields["DimSize"].split())
    except ValueError as exc:
        raise MetaImageError(f"bad DimSize {fields['DimSize']!r}") from exc
    if len(dims) != 3:
        raise MetaImageError(f"DimSize must have 3 entries, got {dims}")
    spacing = tuple(float(t) for t in fields.get("ElementSpacing", "1 1 1").split())
    etype = fields["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise MetaImageError(f"unsupported ElementType {etype}")
    dtype = _ELEMENT_TYPES[etype]
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ByteOrderMSB", "False")).lower() == "true"
    if msb:
        dtype = dtype.newbyteorder(">")
    data_file = fields["ElementDataFile"]
    if data_file.upper() == "LOCAL":
        raise MetaImageError("ElementDataFile = LOCAL is not supported")
    raw_path = path.parent / data_file
    payload = np.fromfile(raw_path, dtype=dtype)
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected or os.path.getsize(raw_path) != expected * dtype.itemsize:
        raise MetaImageError(
            f"{raw_path}: element count {payload.size} does not match DimSize {dims} ({expected})"
        )
    array = payload.reshape(dims[::-1])
    if etype == "MET_UCHAR":
        if kind == "mask":
            return MaskVolume(array, spacing)
        if kind not in (None, "labels"):
            raise ValueError(f"kind must be 'labels' or 'mask' for byte data, got {kind!r}")
        return LabelVolume(array, spacing)
    if kind not in (None, "volume"):
        raise ValueError(f"{etype} payload cannot be read as {kind!r}")
    return Volume(array.astype(np.float32), spacing)
