"""Minimal NIfTI-1 single-file (``.nii`` / ``.nii.gz``) reader and writer.

Scalar and label volumes map to arrays of shape ``(nx, ny, nz)``. Vector
volumes (``dim[0] == 5``, ``dim[5] == 3``) map to ``(3, nx, ny, nz)``, the
layout used for displacement fields.
"""
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
INTENT_VECTOR = 1007
DISPLACEMENT_DESCRIPTION = "displacement, voxel units of this grid"

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
}
CODES = {dt: code for code, dt in DATATYPES.items()}


class NiftiError(Exception):
    """Base class for unreadable NIfTI input."""


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


@dataclass
class VolumeHeader:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    datatype: int = 16
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    description: str = ""
    intent_code: int = 0

    def __post_init__(self):
        if any(int(n) < 1 for n in self.dims):
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _quaternion_affine(hdr, e):
    b, c, d, qx, qy, qz = struct.unpack_from(e + "6f", hdr, 256)
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pixdim = struct.unpack_from(e + "8f", hdr, 76)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    out = np.eye(4)
    out[:3, :3] = rot * np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    out[:3, 3] = (qx, qy, qz)
    return out


def parse_header(raw):
    """Decode the 348-byte header; returns ``(header, endian, vox_offset, slope, inter)``."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"header is {len(raw)} bytes, expected {HEADER_SIZE}")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        e = ">"
    else:
        raise BadMagicError("sizeof_hdr is not 348 in either byte order")
    if raw[344:348] != MAGIC:
        raise BadMagicError(f"magic {raw[344:348]!r} is not a single-file NIfTI-1 marker")
    dim = struct.unpack_from(e + "8h", raw, 40)
    intent_code, datatype = struct.unpack_from(e + "2h", raw, 68)
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} is not supported")
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(e + "3f", raw, 108)
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    qform_code, sform_code = struct.unpack_from(e + "2h", raw, 252)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"dim[0] = {ndim} is out of range")
    dims = tuple(max(1, d) for d in dim[1:ndim + 1])
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.eye(4)
        affine[:3] = np.array(struct.unpack_from(e + "12f", raw, 280)).reshape(3, 4)
    elif qform_code > 0:
        affine = _quaternion_affine(raw, e)
    else:
        affine = np.diag(list(spacing) + [1.0])
    header = VolumeHeader(dims=dims, spacing=spacing, datatype=datatype, affine=affine,
                          description=descrip, intent_code=intent_code)
    return header, e, int(vox_offset), slope, inter


def read_volume(path):
    """Read a NIfTI-1 file.

    Returns
    -------
    data : ndarray
        ``(nx, ny, nz)`` for scalar volumes, ``(3, nx, ny, nz)`` for vector
        volumes. Integer data without intensity scaling keeps its integer
        dtype; everything else is returned as float64.
    header : VolumeHeader
    """
    with _open(path, "rb") as fh:
        raw = fh.read()
    header, e, vox_offset, slope, inter = parse_header(raw)
    dtype = DATATYPES[header.datatype].newbyteorder(e)
    count = int(np.prod(header.dims))
    start = max(vox_offset, HEADER_SIZE)
    need = start + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"file holds {len(raw)} bytes, need {need}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    scaled = slope != 0 and not (slope == 1 and inter == 0)
    if scaled:
        flat = flat.astype(np.float64) * slope + inter
    elif flat.dtype.kind == "f":
        flat = flat.astype(np.float64)
    else:
        flat = flat.astype(flat.dtype.newbyteorder("="))
    full = header.dims + (1,) * (7 - len(header.dims))
    if all(n == 1 for n in full[3:]):
        data = flat.reshape(full[:3], order="F")
    elif full[3] == 1 and full[4] == 3 and all(n == 1 for n in full[5:]):
        data = np.moveaxis(flat.reshape(full[:3] + (3,), order="F"), -1, 0)
    else:
        raise NiftiError(f"unsupported volume layout with dims {header.dims}")
    data = np.ascontiguousarray(data)
    return data, header


def _pick_code(data, dtype):
    if dtype is not None:
        dt = np.dtype(dtype)
        if dt not in CODES:
            raise UnsupportedDatatypeError(f"cannot write dtype {dt}")
        return CODES[dt]
    if np.issubdtype(data.dtype, np.integer) or data.dtype == bool:
        if data.size and (data.min() < -32768 or data.max() > 32767):
            raise ValueError("label values do not fit a 16-bit integer volume")
        return 4
    return 16


def write_volume(path, data, header=None, dtype=None, description=None):
    """Write ``data`` as a single-file NIfTI-1 volume.

    Float data is written as float32 and integer data as int16 unless
    ``dtype`` names another supported type. ``(3, nx, ny, nz)`` arrays are
    written as vector volumes.
    """
    data = np.asarray(data)
    vector = data.ndim == 4 and data.shape[0] == 3
    if not vector and data.ndim != 3:
        raise ValueError(f"expected (nx, ny, nz) or (3, nx, ny, nz) data, got {data.shape}")
    grid = data.shape[1:] if vector else data.shape
    code = _pick_code(data, dtype)
    out_dtype = DATATYPES[code].newbyteorder("<")
    spacing = header.spacing if header is not None else (1.0, 1.0, 1.0)
    affine = header.affine if header is not None else np.diag(list(spacing) + [1.0])
    if description is None:
        description = DISPLACEMENT_DESCRIPTION if vector else (header.description if header else "")

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [5, *grid, 1, 3, 1, 1] if vector else [3, *grid, 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 68, INTENT_VECTOR if vector else 0, code)
    struct.pack_into("<h", hdr, 72, out_dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    hdr[148:228] = description.encode("latin-1")[:79].ljust(80, b"\x00")
    struct.pack_into("<2h", hdr, 252, 0, 2)
    struct.pack_into("<12f", hdr, 280, *np.asarray(affine, dtype=np.float64)[:3].ravel())
    hdr[344:348] = MAGIC
    if vector:
        body = np.moveaxis(data, 0, -1).astype(out_dtype).tobytes(order="F")
    else:
        body = data.astype(out_dtype).tobytes(order="F")
    with _open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(body)
