"""Single-file NIfTI-1 (.nii) reader/writer for the subset ctseg needs.

Supported: uncompressed 3D images, datatype int16 or float32, axis-aligned
geometry (no rotation or shear).  Voxel data round-trips bit-exactly.
"""

import struct

import numpy as np

from .errors import FormatError, IoError, UnsupportedError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\0"

DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: np.dtype("int16"), DT_FLOAT32: np.dtype("float32")}


# (struct format, byte offset) of the header fields we touch
F_SIZEOF = ("i", 0)
F_DIM = ("8h", 40)
F_DATATYPE = ("h", 70)
F_BITPIX = ("h", 72)
F_PIXDIM = ("8f", 76)
F_VOX_OFFSET = ("f", 108)
F_SCL = ("2f", 112)
F_XYZT_UNITS = ("b", 123)
F_DESCRIP = ("80s", 148)
F_QFORM = ("h", 252)
F_SFORM = ("h", 254)
F_QUATERN = ("3f", 256)
F_QOFFSET = ("3f", 268)
F_SROW = ("12f", 280)
F_MAGIC = ("4s", 344)


def encode_header(shape, dtype, spacing, origin, description=""):
    dtype = np.dtype(dtype).newbyteorder("=")
    if dtype == np.int16:
        code = DT_INT16
    elif dtype == np.float32:
        code = DT_FLOAT32
    else:
        raise UnsupportedError(f"cannot write datatype {dtype}")
    hdr = bytearray(VOX_OFFSET)

    def put(field, *values):
        fmt, off = field
        struct.pack_into("<" + fmt, hdr, off, *values)

    dims = [len(shape)] + [int(s) for s in shape] + [1] * (7 - len(shape))
    sx, sy, sz = (float(v) for v in spacing)
    ox, oy, oz = (float(v) for v in origin)
    put(F_SIZEOF, HEADER_SIZE)
    put(F_DIM, *dims)
    put(F_DATATYPE, code)
    put(F_BITPIX, dtype.itemsize * 8)
    put(F_PIXDIM, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    put(F_VOX_OFFSET, float(VOX_OFFSET))
    put(F_SCL, 1.0, 0.0)
    put(F_XYZT_UNITS, 2)  # millimetres
    put(F_DESCRIP, description.encode("ascii", "replace")[:79])
    put(F_QFORM, 1)
    put(F_SFORM, 1)
    put(F_QUATERN, 0.0, 0.0, 0.0)
    put(F_QOFFSET, ox, oy, oz)
    put(F_SROW, sx, 0.0, 0.0, ox, 0.0, sy, 0.0, oy, 0.0, 0.0, sz, oz)
    put(F_MAGIC, MAGIC)
    return bytes(hdr)


def decode_header(buf, path="<buffer>"):
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    (size,) = struct.unpack_from("<i", buf, 0)
    if size == HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")

    def get(field):
        fmt, off = field
        return struct.unpack_from(endian + fmt, buf, off)

    (magic,) = get(F_MAGIC)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} (single-file n+1 expected)")
    dim = get(F_DIM)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedError(f"{path}: only 3D images are supported (dim={dim})")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise FormatError(f"{path}: non-positive dimension in {shape}")
    (code,) = get(F_DATATYPE)
    if code not in _DTYPES:
        raise UnsupportedError(f"{path}: unsupported datatype code {code}")
    pixdim = get(F_PIXDIM)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    (vox_offset,) = get(F_VOX_OFFSET)
    slope, inter = get(F_SCL)
    (qform,) = get(F_QFORM)
    (sform,) = get(F_SFORM)
    if qform > 0:
        if any(abs(q) > 1e-6 for q in get(F_QUATERN)):
            raise UnsupportedError(f"{path}: rotated qform is not supported")
        origin = tuple(float(v) for v in get(F_QOFFSET))
    elif sform > 0:
        srow = np.asarray(get(F_SROW), dtype=np.float64).reshape(3, 4)
        if np.any(np.abs(srow[:, :3] - np.diag(np.diag(srow[:, :3]))) > 1e-6):
            raise UnsupportedError(f"{path}: sheared or rotated sform is not supported")
        origin = tuple(float(v) for v in srow[:, 3])
    else:
        origin = (0.0, 0.0, 0.0)
    return {
        "shape": shape,
        "dtype": _DTYPES[code].newbyteorder(endian),
        "spacing": spacing,
        "origin": origin,
        "vox_offset": int(vox_offset),
        "scl": (float(slope), float(inter)),
    }


def read(path):
    """Return ``(data, spacing, origin)``; data in its stored dtype, axes (x, y, z)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    hdr = decode_header(buf, path)
    count = int(np.prod(hdr["shape"]))
    nbytes = count * hdr["dtype"].itemsize
    off = hdr["vox_offset"]
    if off < HEADER_SIZE or off + nbytes > len(buf):
        raise FormatError(f"{path}: voxel block truncated")
    flat = np.frombuffer(buf, dtype=hdr["dtype"], count=count, offset=off)
    data = flat.reshape(hdr["shape"], order="F").astype(hdr["dtype"].newbyteorder("="))
    slope, inter = hdr["scl"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return np.ascontiguousarray(data), hdr["spacing"], hdr["origin"]


def write(path, data, spacing, origin, description=""):
    data = np.asarray(data)
    if data.ndim != 3:
        raise UnsupportedError("only 3D images can be written")
    if data.dtype == np.bool_:
        data = data.astype(np.int16)
    elif data.dtype.kind == "f" and data.dtype != np.float32:
        data = data.astype(np.float32)
    elif data.dtype.kind in "iu" and data.dtype != np.int16:
        if data.size and (data.min() < -32768 or data.max() > 32767):
            raise UnsupportedError("integer data outside int16 range")
        data = data.astype(np.int16)
    hdr = encode_header(data.shape, data.dtype, spacing, origin, description)
    payload = np.asarray(data, dtype=data.dtype.newbyteorder("<")).tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(hdr)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
