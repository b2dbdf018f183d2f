"""Minimal NIfTI-1 volume I/O (.nii / .nii.gz).

Covers exactly what the pipeline needs: single-file NIfTI-1 ("n+1"),
3D volumes, scalar datatypes, optional scl_slope/scl_inter scaling.
Header bytes are kept around so outputs can be written with the same
geometry metadata as their source volume.
"""

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import IoError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI-1 datatype codes
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_header(path):
    """Read only the 348-byte header."""
    try:
        with _open(path, "rb") as f:
            header = f.read(HEADER_SIZE)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(header) < HEADER_SIZE:
        raise IoError(f"{path}: truncated NIfTI header")
    return header


def read(path):
    """Read a NIfTI-1 file. Returns (array, header_bytes)."""
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(raw) < HEADER_SIZE:
        raise IoError(f"{path}: truncated NIfTI header")
    header = raw[:HEADER_SIZE]

    sizeof_hdr = struct.unpack_from("<i", header, 0)[0]
    endian = "<"
    if sizeof_hdr != HEADER_SIZE:
        sizeof_hdr = struct.unpack_from(">i", header, 0)[0]
        if sizeof_hdr != HEADER_SIZE:
            raise IoError(f"{path}: not a NIfTI-1 file")
        endian = ">"

    dim = struct.unpack_from(endian + "8h", header, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise IoError(f"{path}: bad dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    datatype = struct.unpack_from(endian + "h", header, 70)[0]
    if datatype not in _DTYPES:
        raise IoError(f"{path}: unsupported datatype code {datatype}")
    vox_offset = int(struct.unpack_from(endian + "f", header, 108)[0]) or VOX_OFFSET
    scl_slope = struct.unpack_from(endian + "f", header, 112)[0]
    scl_inter = struct.unpack_from(endian + "f", header, 116)[0]

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # NIfTI stores data Fortran-style: first axis fastest
    arr = data.reshape(shape, order="F").astype(_DTYPES[datatype])
    if scl_slope not in (0.0, 1.0) or (scl_slope != 0.0 and scl_inter != 0.0):
        arr = arr * scl_slope + scl_inter
    if endian == ">":
        # normalize so downstream header reuse stays little-endian
        pixdim = struct.unpack_from(">8f", header, 76)[1:4]
        header = bytes(_blank_header(shape, _DTYPES[datatype], pixdim))
    return arr, header


def _blank_header(shape, dtype, pixdim=(1.0, 1.0, 1.0)):
    h = bytearray(HEADER_SIZE)
    struct.pack_into("<i", h, 0, HEADER_SIZE)
    struct.pack_into("<b", h, 38, ord("r"))  # dim_info unused, regular flag
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", h, 40, *dim)
    struct.pack_into("<h", h, 70, _CODES[np.dtype(dtype)])
    struct.pack_into("<h", h, 72, np.dtype(dtype).itemsize * 8)
    pd = [1.0] + list(pixdim) + [1.0] * (7 - len(pixdim))
    struct.pack_into("<8f", h, 76, *pd)
    struct.pack_into("<f", h, 108, float(VOX_OFFSET))
    struct.pack_into("<f", h, 112, 1.0)  # scl_slope
    # identity sform, 1 mm voxels
    struct.pack_into("<h", h, 254, 1)  # sform_code
    struct.pack_into("<4f", h, 280, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", h, 296, 0.0, 1.0, 0.0, 0.0)
    struct.pack_into("<4f", h, 312, 0.0, 0.0, 1.0, 0.0)
    h[344:348] = b"n+1\x00"
    return h


def _patch_header(header, shape, dtype):
    """Reuse geometry from an existing header, fixing dim/datatype/scaling."""
    h = bytearray(header)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", h, 40, *dim)
    struct.pack_into("<h", h, 70, _CODES[np.dtype(dtype)])
    struct.pack_into("<h", h, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<f", h, 108, float(VOX_OFFSET))
    struct.pack_into("<f", h, 112, 1.0)
    struct.pack_into("<f", h, 116, 0.0)
    h[344:348] = b"n+1\x00"
    return h


def write(path, arr, header=None):
    """Write a 3D array as single-file NIfTI-1. Gzips iff path ends in .gz."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    if header is None:
        h = _blank_header(arr.shape, arr.dtype)
    else:
        h = _patch_header(header, arr.shape, arr.dtype)
    # native little-endian payload; header written little-endian above
    payload = np.asfortranarray(arr).tobytes(order="F")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with _open(path, "wb") as f:
            f.write(bytes(h))
            f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            f.write(payload)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return Path(path)
