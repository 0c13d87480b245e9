"""Binary checkpoint container.

Layout (little-endian): magic ``LMK1``; u32 array count; per array a u16
name length, UTF-8 name, u8 dtype code (0 = f32, 1 = f64), u8 rank,
u32 dims[rank], row-major payload; trailing u32 CRC-32 of all preceding
bytes.  Non-array metadata travels as a JSON byte string stored in a f32
array named ``__meta__``.
"""
import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from latmask.errors import FormatError

MAGIC = b"LMK1"
META_KEY = "__meta__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(arrays, meta=None):
    items = list(arrays.items())
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items.append((META_KEY, np.frombuffer(raw, dtype=np.uint8).astype(np.float32)))
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(items))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode(blob):
    """Return (arrays, meta); raises FormatError on any structural problem."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError("not an LMK1 checkpoint")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch")
    body = blob[:-4]
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays, meta = {}, None
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in _DTYPES:
                raise FormatError(f"array {name!r} has unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * _DTYPES[code].itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"array {name!r} truncated")
            arr = np.frombuffer(body, dtype=_DTYPES[code], count=int(np.prod(dims)), offset=pos).reshape(dims)
            pos += nbytes
            if name == META_KEY:
                meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    except struct.error as exc:
        raise FormatError(f"checkpoint truncated: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after last array")
    return arrays, meta


def save(path, arrays, meta=None):
    blob = encode(arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    return decode(Path(path).read_bytes())


def digest(arrays, meta=None):
    return hashlib.sha256(encode(arrays, meta)).hexdigest()
