"""Binary checkpoint: magic, version, JSON manifest, little-endian payload, CRC32 trailer.

Layout::

    b"M3DC" | u32 version | u32 manifest_len | manifest (utf-8 JSON) | payload | u32 crc32

The CRC covers every byte before the trailer. The manifest lists every array
with its name, shape, dtype and payload offset, plus a free-form ``state`` dict.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"M3DC"
VERSION = 1


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def encode(arrays: dict[str, np.ndarray], state: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "state": state or {}}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(manifest)) + manifest + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 16:
        raise TruncatedError(f"checkpoint too short ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    if 12 + mlen + 4 > len(buf):
        raise TruncatedError("manifest extends past end of file")
    try:
        manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        crc_ok = zlib.crc32(buf[:-4]) & 0xFFFFFFFF == struct.unpack_from("<I", buf, len(buf) - 4)[0]
        raise (CheckpointError if crc_ok else ChecksumError)("unreadable manifest") from None
    start = 12 + mlen
    total = sum(e["nbytes"] for e in manifest["arrays"])
    if start + total + 4 > len(buf):
        raise TruncatedError(f"payload truncated: need {total} bytes")
    if start + total + 4 != len(buf):
        raise CheckpointError("trailing bytes after payload")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        raw = buf[start + e["offset"]:start + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["state"]


def save(path, arrays: dict[str, np.ndarray], state: dict | None = None) -> None:
    data = encode(arrays, state)
    with open(path, "wb") as f:
        f.write(data)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return decode(f.read())
