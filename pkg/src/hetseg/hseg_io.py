"""HSEG1 single-array binary format.

Layout (little-endian)::

    magic    4 bytes  b"HSEG"
    version  u16      1
    H, W, C  u16 x 3
    dtype    u8       0 = float32 image, 1 = uint8 labels
    payload  H*W*C items, row-major (H, W, C)
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HSEG"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class HsegFormatError(ValueError):
    pass


class BadMagicError(HsegFormatError):
    pass


class VersionMismatchError(HsegFormatError):
    pass


class TruncatedError(HsegFormatError):
    pass


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, C) array, got shape {a.shape}")
    if a.dtype == np.float32:
        code = 0
    elif a.dtype == np.uint8:
        code = 1
    else:
        raise ValueError(f"unsupported dtype {a.dtype}; use float32 images or uint8 labels")
    if max(a.shape) > 0xFFFF:
        raise ValueError("extents must fit in 16 bits")
    h, w, c = a.shape
    return _HEADER.pack(MAGIC, VERSION, h, w, c, code) + a.astype(_DTYPES[code], copy=False).tobytes()


def decode(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode`. uint8 arrays come back as ``(H, W)``; float32 as ``(H, W, C)``."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not an HSEG1 file")
    if len(data) < _HEADER.size:
        raise TruncatedError("truncated header")
    _, version, h, w, c, code = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    if code not in _DTYPES:
        raise HsegFormatError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = h * w * c * dtype.itemsize
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedError(
            f"truncated payload: header says {h}x{w}x{c} ({expected} bytes), found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, c).copy()
    if code == 1 and c == 1:
        arr = arr[..., 0]
    return arr.astype(dtype.newbyteorder("="), copy=False)


def write_item(path, array) -> None:
    Path(path).write_bytes(encode(array))


def read_item(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_pgm(path, image) -> None:
    """Plain 8-bit PGM for eyeballing a float image in [0, 1] or a label map."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[..., 0]
    if a.dtype.kind == "f":
        a = np.clip(np.round(a * 255), 0, 255)
    else:
        a = a.astype(np.float64) * (255.0 / max(1, int(a.max())))
    a = a.astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes())
