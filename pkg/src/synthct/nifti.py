"""Minimal reader for single-file NIfTI-1 images (scalar 3D only, optionally gzipped)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import FormatError, IntensitySpace, Volume


class UnsupportedFeatureError(FormatError):
    pass


_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
}


def read_nifti(path, intensity_space: IntensitySpace | str = IntensitySpace.MRI_RAW) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack("<i", raw[:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == 348:
        end = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise UnsupportedFeatureError(f"{path}: magic {magic!r} (only single-file n+1 images are supported)")

    dim = struct.unpack(end + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(end + "2h", raw[70:74])
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = struct.unpack(end + "f", raw[108:112])[0]
    slope, inter = struct.unpack(end + "2f", raw[112:120])

    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise UnsupportedFeatureError(f"{path}: only scalar 3D images are supported (dim={dim[:ndim + 1]})")
    if datatype not in _DTYPES:
        raise UnsupportedFeatureError(f"{path}: datatype code {datatype} is not supported")
    nx, ny, nz = dim[1:4]
    dtype = np.dtype(end + _DTYPES[datatype])
    start = int(vox_offset)
    count = nx * ny * nz
    if start + count * dtype.itemsize > len(raw):
        raise FormatError(f"{path}: payload shorter than dim {nx}x{ny}x{nz}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start).astype(np.float64)
    if slope not in (0.0,) and np.isfinite(slope):
        arr = arr * slope + inter
    # NIfTI stores x fastest; reorder to (z, y, x)
    data = arr.reshape((nz, ny, nx))
    spacing = tuple(abs(float(s)) or 1.0 for s in (pixdim[3], pixdim[2], pixdim[1]))
    return Volume(data, spacing, intensity_space)
