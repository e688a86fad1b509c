"""NIfTI-1 single-file reader/writer for volumes and label maps.

Scope is deliberately narrow: single-file ``.nii`` / ``.nii.gz`` (magic
``n+1``), rank-3 grids (rank-4 with a singleton trailing dimension is
squeezed), and the three datatypes the pipeline needs (uint8, int16,
float32).  NIfTI-2 and the dual ``.hdr``/``.img`` layout are rejected with a
clear error.  Files are little-endian by default; big-endian input is
detected through the header size field.  Gzip containers are detected by the
``1f 8b`` magic bytes regardless of file extension.

The orientation block (qform/sform, header bytes 252..327) is carried as
opaque bytes on :class:`~voxharm.core.Volume` / ``LabelMap`` and written back
verbatim, so round-trips never reinterpret orientation.  Only the translation
part is read, to populate ``origin``.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .core import LabelMap, Volume

__all__ = [
    "NiftiFormatError",
    "NiftiHeaderView",
    "read_header",
    "read_volume",
    "write_volume",
    "read_labels",
    "write_labels",
    "DT_UINT8",
    "DT_INT16",
    "DT_FLOAT32",
]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_DTYPE_OF_CODE = {DT_UINT8: "u1", DT_INT16: "i2", DT_FLOAT32: "f4"}
_BITPIX_OF_CODE = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}
_CODE_OF_NAME = {"uint8": DT_UINT8, "int16": DT_INT16, "float32": DT_FLOAT32}
_INTEGER_CODES = {DT_UINT8, DT_INT16}

# Guard against absurd dim fields before allocating anything.
_MAX_VOXELS = 1 << 40


class NiftiFormatError(ValueError):
    """The file is not a NIfTI-1 single file this reader supports."""


@dataclass(frozen=True)
class NiftiHeaderView:
    """Decoded view of the header fields the pipeline cares about."""

    dims: tuple[int, int, int]
    datatype: int
    bitpix: int
    spacing: tuple[float, float, float]
    scl_slope: float
    scl_inter: float
    vox_offset: int
    byteorder: str                # '<' or '>'
    compressed: bool
    qform_code: int
    sform_code: int
    origin: tuple[float, float, float]
    orientation: bytes            # raw bytes 252..327, preserved on write


def _open_maybe_gzip(path: Path) -> tuple[BinaryIO, bool]:
    raw = open(path, "rb")
    magic = raw.read(2)
    raw.seek(0)
    if magic == GZIP_MAGIC:
        return gzip.open(raw, "rb"), True  # type: ignore[return-value]
    return raw, False


def _parse_header(buf: bytes, compressed: bool, path: Path) -> NiftiHeaderView:
    if len(buf) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    (size_le,) = struct.unpack("<i", buf[:4])
    (size_be,) = struct.unpack(">i", buf[:4])
    if size_le == HEADER_SIZE:
        bo = "<"
    elif size_be == HEADER_SIZE:
        bo = ">"
    elif HEADER_SIZE + 192 in (size_le, size_be):  # 540 = NIfTI-2 header size
        raise NiftiFormatError(f"{path}: NIfTI-2 is not supported, only NIfTI-1")
    else:
        raise NiftiFormatError(
            f"{path}: corrupt header (size field {size_le} != {HEADER_SIZE})")

    magic = buf[344:348]
    if magic == MAGIC_PAIR:
        raise NiftiFormatError(
            f"{path}: dual-file (.hdr/.img) NIfTI is not supported, use single-file n+1")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_SINGLE!r}")

    dim = struct.unpack(bo + "8h", buf[40:56])
    rank = dim[0]
    if rank == 3 or (rank == 4 and dim[4] == 1):
        dims = (int(dim[1]), int(dim[2]), int(dim[3]))
    else:
        raise NiftiFormatError(f"{path}: unsupported rank {rank} (dim={dim[1:rank + 1]})")
    if any(d < 1 for d in dims):
        raise NiftiFormatError(f"{path}: non-positive dimensions {dims}")
    if dims[0] * dims[1] * dims[2] > _MAX_VOXELS:
        raise NiftiFormatError(f"{path}: dimension overflow {dims}")

    (datatype, bitpix) = struct.unpack(bo + "2h", buf[70:74])
    pixdim = struct.unpack(bo + "8f", buf[76:108])
    spacing = []
    for i, p in enumerate(pixdim[1:4]):
        if p == 0 or not np.isfinite(p):
            raise NiftiFormatError(f"{path}: non-positive pixdim[{i + 1}] = {p}")
        if p < 0:
            warnings.warn(f"{path}: negative pixdim[{i + 1}], taking absolute value")
            p = -p
        spacing.append(float(p))

    (vox_offset,) = struct.unpack(bo + "f", buf[108:112])
    (scl_slope, scl_inter) = struct.unpack(bo + "2f", buf[112:120])
    if not np.isfinite(vox_offset) or not (HEADER_SIZE <= vox_offset < 2**31):
        raise NiftiFormatError(f"{path}: bad vox_offset {vox_offset}")
    if not np.isfinite(scl_slope) or not np.isfinite(scl_inter):
        raise NiftiFormatError(f"{path}: non-finite scl_slope/scl_inter")

    orientation = buf[252:328]
    (qform_code, sform_code) = struct.unpack(bo + "2h", buf[252:256])
    qoffset = struct.unpack(bo + "3f", buf[268:280])
    srow = struct.unpack(bo + "12f", buf[280:328])
    if qform_code > 0:
        origin = (float(qoffset[0]), float(qoffset[1]), float(qoffset[2]))
    elif sform_code > 0:
        origin = (float(srow[3]), float(srow[7]), float(srow[11]))
    else:
        origin = (0.0, 0.0, 0.0)

    return NiftiHeaderView(
        dims=dims,
        datatype=int(datatype),
        bitpix=int(bitpix),
        spacing=(spacing[0], spacing[1], spacing[2]),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        vox_offset=int(round(vox_offset)),
        byteorder=bo,
        compressed=compressed,
        qform_code=int(qform_code),
        sform_code=int(sform_code),
        origin=origin,
        orientation=orientation,
    )


def read_header(path: str | Path) -> NiftiHeaderView:
    """Decode the header of a NIfTI-1 single file without reading voxel data."""
    path = Path(path)
    stream, compressed = _open_maybe_gzip(path)
    with stream:
        return _parse_header(stream.read(HEADER_SIZE), compressed, path)


def _read_raw(path: Path) -> tuple[NiftiHeaderView, np.ndarray]:
    stream, compressed = _open_maybe_gzip(path)
    with stream:
        header = _parse_header(stream.read(HEADER_SIZE), compressed, path)
        if header.datatype not in _DTYPE_OF_CODE:
            raise NiftiFormatError(
                f"{path}: unsupported datatype code {header.datatype} "
                f"(supported: {sorted(_DTYPE_OF_CODE)})")
        stream.read(header.vox_offset - HEADER_SIZE)
        dtype = np.dtype(header.byteorder + _DTYPE_OF_CODE[header.datatype])
        n = header.dims[0] * header.dims[1] * header.dims[2]
        buf = stream.read(n * dtype.itemsize)
        if len(buf) < n * dtype.itemsize:
            raise NiftiFormatError(
                f"{path}: truncated data section, expected {n * dtype.itemsize} bytes "
                f"got {len(buf)}")
    flat = np.frombuffer(buf, dtype=dtype)
    return header, flat.reshape(header.dims, order="F")


def _apply_scaling(data: np.ndarray, header: NiftiHeaderView) -> np.ndarray:
    out = data.astype(np.float64)
    slope, inter = header.scl_slope, header.scl_inter
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:   # NIfTI convention: slope 0 means "no scaling stored"
            slope = 1.0
        out = out * slope + inter
    return out


def read_volume(path: str | Path) -> Volume:
    """Read an intensity volume, applying scl_slope/scl_inter to true HU values."""
    path = Path(path)
    header, raw = _read_raw(path)
    data = _apply_scaling(raw, header)
    return Volume(data, spacing=header.spacing, origin=header.origin,
                  orientation=header.orientation)


def read_labels(path: str | Path, vocabulary: Mapping[int, str] | None = None,
                *, strict: bool = False) -> LabelMap:
    """Read a label map.  No value scaling is applied.

    ``vocabulary`` normally comes from dataset configuration; without one, a
    placeholder vocabulary is built from the labels present.  With
    ``strict=True``, labels outside the supplied vocabulary are an error;
    otherwise they are added with placeholder names.
    """
    path = Path(path)
    header, raw = _read_raw(path)
    if header.datatype not in _INTEGER_CODES:
        as_int = np.asarray(raw, dtype=np.int64)
        if not np.array_equal(as_int, raw):
            raise NiftiFormatError(f"{path}: label file stores non-integer values")
        raw = as_int
    if header.scl_slope not in (0.0, 1.0) or header.scl_inter != 0.0:
        warnings.warn(f"{path}: ignoring scl_slope/scl_inter on a label map")
    present = set(np.unique(raw).tolist()) - {0}
    if vocabulary is None:
        vocab = {int(v): f"label_{int(v)}" for v in sorted(present)}
    else:
        vocab = {int(k): str(v) for k, v in dict(vocabulary).items()}
        extra = present - set(vocab)
        if extra:
            if strict:
                raise NiftiFormatError(
                    f"{path}: labels {sorted(extra)} exceed the vocabulary {sorted(vocab)}")
            vocab.update({int(v): f"label_{int(v)}" for v in sorted(extra)})
    return LabelMap(raw, spacing=header.spacing, origin=header.origin,
                    vocabulary=vocab, orientation=header.orientation)


def _default_orientation(spacing: tuple[float, float, float],
                         origin: tuple[float, float, float]) -> bytes:
    # qform_code=0, sform_code=1, sform = diag(spacing) with origin translation.
    return struct.pack(
        "<2h3f3f4f4f4f",
        0, 1,
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
        spacing[0], 0.0, 0.0, origin[0],
        0.0, spacing[1], 0.0, origin[1],
        0.0, 0.0, spacing[2], origin[2],
    )


def _pack_header(dims: tuple[int, int, int], spacing: tuple[float, float, float],
                 datatype: int, scl_slope: float, scl_inter: float,
                 orientation: bytes) -> bytes:
    if len(orientation) != 76:
        raise ValueError(f"orientation block must be 76 bytes, got {len(orientation)}")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, _BITPIX_OF_CODE[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2],
                     0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    hdr[123] = 2  # spatial units: millimeters
    descrip = b"voxharm"
    hdr[148:148 + len(descrip)] = descrip
    hdr[252:328] = orientation
    hdr[344:348] = MAGIC_SINGLE
    return bytes(hdr)


def _resolve_datatype(datatype: int | str) -> int:
    if isinstance(datatype, str):
        try:
            return _CODE_OF_NAME[datatype]
        except KeyError:
            raise ValueError(f"unsupported datatype {datatype!r}, "
                             f"choose from {sorted(_CODE_OF_NAME)}") from None
    if datatype not in _DTYPE_OF_CODE:
        raise ValueError(f"unsupported datatype code {datatype}, "
                         f"supported: {sorted(_DTYPE_OF_CODE)}")
    return int(datatype)


def _write_file(path: Path, header: bytes, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload
    if path.name.endswith(".gz"):
        with open(path, "wb") as f:
            # mtime=0 and no embedded filename keep the bytes reproducible.
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as f:
            f.write(blob)


def write_volume(volume: Volume, path: str | Path, datatype: int | str = "float32",
                 *, scl_slope: float | None = None, scl_inter: float | None = None) -> None:
    """Write a volume as NIfTI-1 single file (gzipped when the name ends in .gz).

    Float32 output is lossless for float32-valued data.  Integer datatypes
    round to the nearest integer and require the (optionally scaled) values to
    fit the target range; pass ``scl_slope``/``scl_inter`` to store
    ``(value - inter) / slope`` with the scaling recorded in the header.
    """
    path = Path(path)
    code = _resolve_datatype(datatype)
    data = volume.data
    slope, inter = 1.0, 0.0
    if scl_slope is not None or scl_inter is not None:
        slope = 1.0 if scl_slope is None else float(scl_slope)
        inter = 0.0 if scl_inter is None else float(scl_inter)
        if slope == 0.0 or not np.isfinite(slope) or not np.isfinite(inter):
            raise ValueError(f"invalid scaling slope={slope} inter={inter}")
        data = (data - inter) / slope
    if code in _INTEGER_CODES:
        dtype = np.dtype("<" + _DTYPE_OF_CODE[code])
        stored = np.rint(data)
        info = np.iinfo(dtype)
        if stored.size and (stored.min() < info.min or stored.max() > info.max):
            raise ValueError(
                f"values [{stored.min()}, {stored.max()}] out of range for "
                f"{dtype.name}; provide scl_slope/scl_inter scaling")
        stored = stored.astype(dtype)
    else:
        stored = data.astype(np.dtype("<f4"))
    orientation = volume.orientation or _default_orientation(volume.spacing, volume.origin)
    header = _pack_header(volume.dims, volume.spacing, code, slope, inter, orientation)
    _write_file(path, header, stored.tobytes(order="F"))


def write_labels(labels: LabelMap, path: str | Path, datatype: int | str = "uint8") -> None:
    """Write a label map with an integer datatype and no value scaling."""
    path = Path(path)
    code = _resolve_datatype(datatype)
    if code not in _INTEGER_CODES:
        raise ValueError(f"label maps require an integer datatype, got {datatype!r}")
    dtype = np.dtype("<" + _DTYPE_OF_CODE[code])
    info = np.iinfo(dtype)
    data = labels.data
    if data.size and (data.min() < info.min or data.max() > info.max):
        raise ValueError(f"labels [{data.min()}, {data.max()}] out of range for {dtype.name}")
    stored = data.astype(dtype)
    orientation = labels.orientation or _default_orientation(labels.spacing, labels.origin)
    header = _pack_header(labels.dims, labels.spacing, code, 1.0, 0.0, orientation)
    _write_file(path, header, stored.tobytes(order="F"))
