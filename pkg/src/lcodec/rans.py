"""64-bit-state rANS with 32-bit renormalization and 16-bit probabilities.

The layout follows the classic ``rans64`` construction: the encoder runs
over the symbols in reverse, pushing 32-bit words whenever the state would
overflow, then flushes the 8-byte state.  The emitted stream is arranged
so the decoder reads state then words strictly forward.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from collections.abc import Callable, Sequence
from typing import NamedTuple

from lcodec.errors import DecodeError

SCALE_BITS = 16
TOTAL = 1 << SCALE_BITS
RANS_L = 1 << 31
_MASK32 = (1 << 32) - 1
_MASK_SCALE = TOTAL - 1


class SymbolCode(NamedTuple):
    cum: int
    freq: int

    def validate(self) -> None:
        if self.freq < 1 or self.cum < 0 or self.cum + self.freq > TOTAL:
            raise ValueError(f"invalid symbol code {self!r}")


def rans_encode(symbols: Sequence[SymbolCode], validate: bool = True) -> bytes:
    """Encode ``symbols`` (given in decode order) into a byte string."""
    x = RANS_L
    words = []
    x_max_base = (RANS_L >> SCALE_BITS) << 32
    for cum, freq in reversed(symbols):
        if validate and (freq < 1 or cum < 0 or cum + freq > TOTAL):
            raise ValueError(f"invalid symbol code ({cum}, {freq})")
        if x >= x_max_base * freq:
            words.append(x & _MASK32)
            x >>= 32
        x = ((x // freq) << SCALE_BITS) + (x % freq) + cum
    words.reverse()
    return struct.pack("<Q", x) + struct.pack(f"<{len(words)}I", *words)


class RansDecoder:
    """Forward reader over a :func:`rans_encode` stream.

    Call :meth:`peek` for the cumulative-frequency probe, resolve it to a
    symbol with the model, then :meth:`advance` with that symbol's code.
    """

    def __init__(self, data: bytes):
        if len(data) < 8 or (len(data) - 8) % 4:
            raise DecodeError(f"rANS stream length {len(data)} is not 8 + 4k bytes")
        self._x = struct.unpack_from("<Q", data, 0)[0]
        if self._x < RANS_L:
            raise DecodeError("initial rANS state below the normalization bound")
        n = (len(data) - 8) // 4
        self._words = struct.unpack_from(f"<{n}I", data, 8)
        self._pos = 0

    def peek(self) -> int:
        return self._x & _MASK_SCALE

    def advance(self, cum: int, freq: int) -> None:
        x = freq * (self._x >> SCALE_BITS) + (self._x & _MASK_SCALE) - cum
        if x < RANS_L:
            if self._pos >= len(self._words):
                raise DecodeError("rANS stream exhausted (truncated or corrupted payload)")
            x = (x << 32) | self._words[self._pos]
            self._pos += 1
        self._x = x

    def finish(self) -> None:
        """Check that the whole stream was consumed and the state is initial."""
        if self._pos != len(self._words):
            raise DecodeError(f"{len(self._words) - self._pos} unread words at end of rANS stream")
        if self._x != RANS_L:
            raise DecodeError("final rANS state mismatch (corrupted payload or model)")


Resolver = Callable[[int], tuple[int, SymbolCode]]


def rans_decode(data: bytes, resolver: Resolver, count: int, check_end: bool = True) -> list[int]:
    """Decode ``count`` symbols.

    ``resolver`` maps a probe in ``[0, 65536)`` to ``(symbol, code)`` with
    ``code.cum <= probe < code.cum + code.freq``; it may be stateful, since
    it is called once per symbol, in order.
    """
    dec = RansDecoder(data)
    out = []
    for _ in range(count):
        cf = dec.peek()
        sym, (cum, freq) = resolver(cf)
        if not (freq >= 1 and cum <= cf < cum + freq):
            raise DecodeError(f"resolver returned code ({cum}, {freq}) not covering probe {cf}")
        dec.advance(cum, freq)
        out.append(sym)
    if check_end:
        dec.finish()
    return out


def table_resolver(cdf: Sequence[int]) -> Resolver:
    """Resolver for a single static table ``cdf`` (length n+1, 0 .. 65536)."""

    def resolve(cf: int):
        s = bisect_right(cdf, cf) - 1
        return s, SymbolCode(cdf[s], cdf[s + 1] - cdf[s])

    return resolve


def lookup(cdf: Sequence[int], cf: int) -> int:
    """Index of the symbol whose interval ``[cdf[s], cdf[s+1])`` holds ``cf``."""
    return bisect_right(cdf, cf) - 1
