"""On-disk formats: the ``.ten`` tensor file and binary PPM/PGM images."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

TEN_MAGIC = b"TEN1"


class FormatError(ValueError):
    """Raised for malformed tensor or image files."""


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in one byte")
    head = TEN_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = head + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse a ``.ten`` payload into a float64 array (values are float32-exact)."""
    if len(buf) < 9 or buf[:4] != TEN_MAGIC:
        raise FormatError(f"{source}: bad magic, not a TEN1 tensor file")
    rank = buf[4]
    head_len = 5 + 4 * rank
    if len(buf) < head_len + 4:
        raise FormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 5)
    count = int(np.prod(shape, dtype=np.int64))
    expected = head_len + 4 * count + 4
    if len(buf) != expected:
        raise FormatError(f"{source}: expected {expected} bytes, found {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, expected - 4)
    if crc != zlib.crc32(buf[: expected - 4]):
        raise FormatError(f"{source}: CRC mismatch")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=head_len)
    return data.astype(np.float64).reshape(shape)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))


def tensor_io(mode: str, path, arr=None):
    """Read (``mode='r'``) or write (``mode='w'``) a ``.ten`` file."""
    if mode == "r":
        return read_tensor(path)
    if mode == "w":
        write_tensor(path, arr)
        return np.asarray(arr, dtype=np.float64)
    raise ValueError(f"mode must be 'r' or 'w', got {mode!r}")


# Netpbm -----------------------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img) -> None:
    """Write ``img`` (floats in [0, 1] or uint8) as P6 (H x W x 3) or P5 (H x W)."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot write image of shape {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + arr.tobytes())


def _tokens(buf: bytes, count: int):
    """Split the first ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PPM/PGM; returns uint8 ``H x W x 3`` or ``H x W``."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise FormatError(f"{path}: only 8-bit binary P5/P6 supported")
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    if len(buf) - pos < n:
        raise FormatError(f"{path}: expected {n} pixel bytes, found {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)).copy()
