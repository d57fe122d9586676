"""Fixed-point tensors with power-of-two scales.

Every tensor in the codec (images, activations, latents, weights) is a
16-bit signed integer array with a single per-tensor shift ``q``: the real
value of a stored integer ``v`` is ``v / 2**q``.  There is no zero point.

Two rounding rules are used and must not be mixed up:

* float -> int: round half away from zero (:func:`quantize_value`);
* int -> int:   add ``2**(shift-1)`` then arithmetic right shift
  (:func:`requantize`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lcodec.errors import FormatError

INT16_MIN = -32768
INT16_MAX = 32767
MAX_SHIFT = 15

QTNS_MAGIC = b"QTNS"
QTNS_VERSION = 1
_QTNS_HEADER = struct.Struct("<4sBB3I")


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def saturate_int16(v):
    return np.clip(v, INT16_MIN, INT16_MAX)


def _check_shift(q_shift: int) -> None:
    if not 0 <= q_shift <= MAX_SHIFT:
        raise ValueError(f"q_shift must be in [0, {MAX_SHIFT}], got {q_shift}")


def quantize_value(x, q_shift: int):
    """Quantize real ``x`` to int16 at scale ``2**q_shift`` (saturating)."""
    _check_shift(q_shift)
    r = round_half_away(np.asarray(x, dtype=np.float64) * (1 << q_shift))
    return saturate_int16(r).astype(np.int16)


def dequantize_value(v, q_shift: int):
    _check_shift(q_shift)
    return np.asarray(v, dtype=np.float64) / (1 << q_shift)


def qcd_proxy(x, q_shift: int, clip_abs: int = INT16_MAX):
    """Quantize, clip to ``[-clip_abs, clip_abs]``, dequantize.

    Float-space emulation of a weight stored at ``q_shift``; an external
    trainer can use it as a fake-quantization op.
    """
    if clip_abs <= 0:
        raise ValueError("clip_abs must be positive")
    _check_shift(q_shift)
    r = round_half_away(np.asarray(x, dtype=np.float64) * (1 << q_shift))
    return np.clip(r, -clip_abs, clip_abs) / (1 << q_shift)


def requantize(acc, shift: int):
    """Rescale an integer accumulator down by ``2**shift`` into int16.

    Rounds to nearest by adding half an output step before the arithmetic
    shift, so exact negative halves round towards +inf.  A negative shift
    is a saturating left shift.
    """
    a = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        a = (a + (1 << (shift - 1))) >> shift
    elif shift < 0:
        a = np.clip(a, INT16_MIN, INT16_MAX) << (-shift)
    return saturate_int16(a).astype(np.int16)


def round_shift_away(v, shift: int):
    """Integer rescale by ``2**-shift`` with ties away from zero."""
    a = np.asarray(v, dtype=np.int64)
    if shift <= 0:
        return a << (-shift)
    half = 1 << (shift - 1)
    return np.where(a >= 0, (a + half) >> shift, -((-a + half) >> shift))


@dataclass(frozen=True, eq=False)
class QTensor:
    """Integer tensor of shape ``(c, h, w)`` at a per-tensor shift.

    The batch dimension of 1 is implicit.  ``data`` is stored as a
    read-only int16 array.
    """

    data: np.ndarray
    q_shift: int

    def __post_init__(self):
        _check_shift(self.q_shift)
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise ValueError(f"QTensor needs a non-empty (c, h, w) array, got shape {arr.shape}")
        if arr.dtype != np.int16:
            if np.any(arr < INT16_MIN) or np.any(arr > INT16_MAX):
                raise ValueError("QTensor values must fit in int16")
            arr = arr.astype(np.int16)
        else:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_real(cls, x, q_shift: int) -> QTensor:
        return cls(quantize_value(x, q_shift), q_shift)

    def to_real(self) -> np.ndarray:
        return dequantize_value(self.data, self.q_shift)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return self.q_shift == other.q_shift and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.q_shift, self.shape, self.data.tobytes()))

    # QTNS: magic, version u8, q_shift u8, c/h/w u32 LE, int16 LE payload (c, h, w order)
    def to_bytes(self) -> bytes:
        header = _QTNS_HEADER.pack(QTNS_MAGIC, QTNS_VERSION, self.q_shift, *self.shape)
        return header + self.data.astype("<i2").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> QTensor:
        if len(buf) < _QTNS_HEADER.size:
            raise FormatError("truncated QTNS header", len(buf))
        magic, version, q_shift, c, h, w = _QTNS_HEADER.unpack_from(buf, 0)
        if magic != QTNS_MAGIC:
            raise FormatError(f"bad QTNS magic {magic!r}", 0)
        if version != QTNS_VERSION:
            raise FormatError(f"unsupported QTNS version {version}", 4)
        if q_shift > MAX_SHIFT:
            raise FormatError(f"q_shift {q_shift} out of range", 5)
        if min(c, h, w) == 0:
            raise FormatError("QTNS shape has a zero dimension", 6)
        need = _QTNS_HEADER.size + 2 * c * h * w
        if len(buf) != need:
            raise FormatError(f"QTNS payload size {len(buf)} != expected {need}", min(len(buf), need))
        data = np.frombuffer(buf, dtype="<i2", offset=_QTNS_HEADER.size).reshape(c, h, w)
        return cls(data.astype(np.int16), q_shift)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> QTensor:
        return cls.from_bytes(Path(path).read_bytes())
