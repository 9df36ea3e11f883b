"""Small deterministic container format for named numpy arrays.

Layout::

    magic (4 bytes) | version (uint16) | header length (uint32) | JSON header | array blobs

The JSON header carries free-form metadata plus, for each array, its name,
dtype, shape, byte offset and byte length relative to the start of the blob
section. Arrays are stored C-contiguous, little-endian. Writing the same
inputs always produces the same bytes.
"""

import hashlib
import json
import struct

import numpy as np

_PREFIX = struct.Struct("<4sHI")


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short sha256 digest of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def dumps(magic: bytes, version: int, meta: dict, arrays: dict) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dt.str, "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = canonical_json({"meta": meta, "arrays": entries}).encode("utf-8")
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(blobs)


def loads(data: bytes, magic: bytes, max_version: int):
    """Inverse of :func:`dumps`. Returns ``(version, meta, arrays)``."""
    if len(data) < _PREFIX.size:
        raise FormatError("truncated file")
    got_magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version > max_version:
        raise FormatError(f"unsupported format version {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        buf = data[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError(f"array {e['name']} truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return version, header["meta"], arrays
