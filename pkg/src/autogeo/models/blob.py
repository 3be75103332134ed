"""
Versioned model container.

Layout (all integers little-endian)::

    magic        8 bytes   b"AGEOMDL\\0"
    version      uint32    FORMAT_VERSION
    header_len   uint32
    header       header_len bytes of UTF-8 JSON
    arrays       float32 LE, concatenated in header["arrays"] order

The header carries architecture, config, class map, feature/filter specs,
layer ids and window size, plus ``arrays``: a list of
``{"name", "shape", "dtype"}`` where ``dtype`` is the dtype to restore.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import BlobFormatError

MAGIC = b"AGEOMDL\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def pack_blob(header: dict, arrays) -> bytes:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    specs, chunks = [], []
    for name, arr in arrays:
        arr = np.asarray(arr)
        as_f32 = arr.astype("<f4")
        if arr.dtype.kind in "iub" and not np.array_equal(as_f32.astype(arr.dtype), arr):
            raise BlobFormatError(f"array {name!r} is not exactly representable as float32")
        specs.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        chunks.append(np.ascontiguousarray(as_f32).tobytes())
    header["arrays"] = specs
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(text)) + text + b"".join(chunks)


def read_header(blob: bytes) -> dict:
    if len(blob) < _PREFIX.size:
        raise BlobFormatError("blob is truncated")
    magic, version, n = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BlobFormatError("not a model blob (bad magic)")
    if version != FORMAT_VERSION:
        raise BlobFormatError(f"unsupported blob version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobFormatError(f"corrupt blob header: {exc}") from None
    if header.get("format_version") != version:
        raise BlobFormatError("header format_version does not match container")
    header["_offset"] = _PREFIX.size + n
    return header


def unpack_blob(blob: bytes):
    """Return (header, {name: array})."""
    header = read_header(blob)
    offset = header.pop("_offset")
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise BlobFormatError(f"blob truncated inside array {spec['name']!r}")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[spec["name"]] = data.reshape(spec["shape"]).astype(np.dtype(spec["dtype"]))
        offset = end
    if offset != len(blob):
        raise BlobFormatError("trailing bytes after last array")
    return header, arrays
