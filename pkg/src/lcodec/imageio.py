"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from lcodec.errors import FormatError


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos, n = [], 0, len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header", pos)
    return out, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Parse a P6 image into a ``(height, width, 3)`` uint8 array."""
    toks, off = _tokens(buf, 4)
    if toks[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {toks[0]!r})", 0)
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise FormatError("non-numeric PPM header field", 0) from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", 0)
    if width <= 0 or height <= 0:
        raise FormatError("PPM has a zero dimension", 0)
    need = width * height * 3
    if len(buf) - off < need:
        raise FormatError("truncated PPM raster", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected a (height, width, 3) uint8 image")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))
