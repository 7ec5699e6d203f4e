"""Readers and writers for the on-disk formats: PPM, PFM, camera.txt and OBJ."""

from __future__ import annotations

import os
import re

import numpy as np


class ParseError(ValueError):
    """Malformed file; carries the byte offset (binary formats) or line number (text)."""

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = f" at byte {offset}" if offset is not None else f" at line {line}" if line is not None else ""
        super().__init__(message + where)
        self.offset = offset
        self.line = line


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ParseError("truncated header", offset=pos)
        tokens.append(m.group(2))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise ParseError("missing whitespace after header", offset=pos)
    return tokens, pos + 1


# PPM --------------------------------------------------------------------


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6, maxval 255; input is linear RGB in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {rgb.shape}")
    if not np.all(np.isfinite(rgb)):
        raise ValueError("image contains non-finite values")
    h, w, _ = rgb.shape
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    tokens, pos = _header_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise ParseError(f"bad magic {tokens[0]!r}", offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-integer header field", offset=0) from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise ParseError(f"unsupported header {w}x{h} maxval {maxval}", offset=0)
    need = w * h * 3
    if len(buf) - pos < need:
        raise ParseError(f"pixel data truncated: need {need} bytes", offset=len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / 255.0


# PFM --------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0); ``Pf`` for H x W, ``PF`` for H x W x 3."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM needs H x W or H x W x 3, got {arr.shape}")
    h, w = arr.shape[:2]
    # rows are stored bottom to top
    payload = np.ascontiguousarray(np.flipud(arr).astype("<f4"))
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(payload.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    tokens, pos = _header_tokens(buf, 4)
    if tokens[0] not in (b"Pf", b"PF"):
        raise ParseError(f"bad magic {tokens[0]!r}", offset=0)
    channels = 1 if tokens[0] == b"Pf" else 3
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError:
        raise ParseError("malformed header field", offset=0) from None
    if w <= 0 or h <= 0 or scale == 0:
        raise ParseError(f"bad dimensions {w}x{h} or scale {scale}", offset=0)
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * channels * 4
    if len(buf) - pos < need:
        raise ParseError(f"payload truncated: need {need} bytes, have {len(buf) - pos}", offset=len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(arr.reshape(shape)).copy()


# camera.txt -------------------------------------------------------------


def write_camera(path, camera) -> None:
    """R (9, row-major), t (3), fx fy cx cy, W H, whitespace separated."""
    lines = [
        " ".join(repr(float(v)) for v in camera.R.reshape(-1)),
        " ".join(repr(float(v)) for v in camera.t),
        " ".join(repr(float(v)) for v in (camera.fx, camera.fy, camera.cx, camera.cy)),
        f"{int(camera.width)} {int(camera.height)}",
    ]
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_camera(path):
    from .scene import Camera

    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) != 18:
        raise ParseError(f"camera file needs 18 values, found {len(tokens)}")
    try:
        vals = [float(x) for x in tokens[:16]]
        w, h = int(tokens[16]), int(tokens[17])
    except ValueError as exc:
        raise ParseError(f"camera file: {exc}") from None
    return Camera(fx=vals[12], fy=vals[13], cx=vals[14], cy=vals[15], R=np.array(vals[:9]).reshape(3, 3),
                  t=np.array(vals[9:12]), width=w, height=h)


# OBJ --------------------------------------------------------------------


def write_obj(path, vertices: np.ndarray, faces: np.ndarray, normals: np.ndarray | None = None) -> None:
    with open(path, "w", newline="\n") as f:
        for v in vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if normals is not None:
            for n in normals:
                f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for tri in np.asarray(faces, dtype=np.int64) + 1:
            if normals is not None:
                f.write(f"f {tri[0]}//{tri[0]} {tri[1]}//{tri[1]} {tri[2]}//{tri[2]}\n")
            else:
                f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    verts, norms, faces = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "vn":
                    norms.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise ParseError(f"{os.fspath(path)}: {exc}", line=lineno) from None
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    fc = np.asarray(faces, dtype=np.int64).reshape(-1, 3) - 1
    if fc.size and (fc.min() < 0 or fc.max() >= len(v)):
        raise ParseError(f"{os.fspath(path)}: face index out of range")
    n = np.asarray(norms, dtype=np.float64).reshape(-1, 3) if norms else None
    return v, fc, n
