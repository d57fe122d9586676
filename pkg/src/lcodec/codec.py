"""Image encode/decode pipelines and the QBIT container.

Bitstream layout (little-endian)::

    magic "QBIT" | version u8 | width u32 | height u32 | lambda index u8 |
    model hash 8 bytes | m_h u16 | m_w u16 | s u16 | payload length u32 |
    rANS payload

The payload carries, per channel in coding order, one activation bit and,
when the channel is active, all its values in raster order.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from lcodec.entropy import ACT_TOTAL, FACTORIZED, K2, EntropyModelSet, estimate_bits
from lcodec.errors import CodecError, FormatError, ModelMismatchError
from lcodec.metrics import psnr
from lcodec.nn import DECODER, ENCODER, ModelGraph, forward_batch
from lcodec.qtensor import round_shift_away
from lcodec.rans import RansDecoder, SymbolCode, lookup, rans_encode

QBIT_MAGIC = b"QBIT"
QBIT_VERSION = 1
_HEADER = struct.Struct("<4sBIIB8sHHHI")
HEADER_SIZE = _HEADER.size

INPUT_SHIFT = 8
# Lambda values of the reference rate points, kept in their published order.
LAMBDAS = (0.0018, 0.0035, 0.0067, 0.02, 0.04, 0.08, 0.0130)
NO_LAMBDA_INDEX = 255


def lambda_index(lam: float) -> int:
    for idx, ref in enumerate(LAMBDAS):
        if math.isclose(lam, ref, rel_tol=1e-9):
            return idx
    return NO_LAMBDA_INDEX


def rdoq_lambda(training_lambda: float, num_pixels: int) -> float:
    """Map a training-loss lambda to the ``D + lam * R`` lambda used here.

    Training minimizes ``bpp + lam_t * MSE`` (MSE in 8-bit units).  Dividing
    by ``lam_t`` and writing ``bpp = bits / num_pixels`` gives
    ``MSE + bits / (lam_t * num_pixels)``.
    """
    if training_lambda <= 0 or num_pixels <= 0:
        raise ValueError("training lambda and pixel count must be positive")
    return 1.0 / (training_lambda * num_pixels)


def model_hash(decoder: ModelGraph, models: EntropyModelSet) -> bytes:
    return hashlib.sha256(decoder.to_bytes() + models.to_bytes()).digest()[:8]


@dataclass(frozen=True)
class BitstreamHeader:
    width: int
    height: int
    lambda_index: int
    model_hash: bytes
    m_h: int
    m_w: int
    s: int
    version: int = QBIT_VERSION


@dataclass(frozen=True)
class Bitstream:
    header: BitstreamHeader
    payload: bytes

    def to_bytes(self) -> bytes:
        h = self.header
        return _HEADER.pack(QBIT_MAGIC, h.version, h.width, h.height, h.lambda_index, h.model_hash,
                            h.m_h, h.m_w, h.s, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> Bitstream:
        if len(buf) < HEADER_SIZE:
            raise FormatError("truncated QBIT header", len(buf))
        magic, version, w, h, lam_idx, mhash, m_h, m_w, s, n = _HEADER.unpack_from(buf, 0)
        if magic != QBIT_MAGIC:
            raise FormatError(f"bad QBIT magic {magic!r}", 0)
        if version != QBIT_VERSION:
            raise FormatError(f"unsupported QBIT version {version}", 4)
        if min(w, h, m_h, m_w, s) == 0:
            raise FormatError("QBIT header has a zero dimension", 5)
        if len(buf) != HEADER_SIZE + n:
            raise FormatError(f"payload length {len(buf) - HEADER_SIZE} != declared {n}", min(len(buf), HEADER_SIZE + n))
        header = BitstreamHeader(w, h, lam_idx, mhash, m_h, m_w, s, version)
        return cls(header, bytes(buf[HEADER_SIZE:]))


# --------------------------------------------------------------------------
# latent <-> symbols
# --------------------------------------------------------------------------


def _activation_code(act12: int, active: bool) -> SymbolCode:
    split = (ACT_TOTAL - act12) << 4
    return SymbolCode(split, (1 << 16) - split) if active else SymbolCode(0, split)


def latent_symbols(latent: np.ndarray, models: EntropyModelSet) -> list[SymbolCode]:
    """Symbol codes of a ``(s, h, w)`` latent in decode order."""
    v = np.asarray(latent, dtype=np.int64)
    codes: list[SymbolCode] = []
    for pos, k in enumerate(models.order):
        ch = models.channels[k]
        plane = v[k]
        active = bool(np.any(plane != ch.mpv_free))
        codes.append(_activation_code(ch.act12, active))
        if not active:
            continue
        idx = plane - ch.v_min
        if idx.min() < 0 or idx.max() >= ch.size:
            raise CodecError(f"channel {k}: latent value outside support (clamp before coding)")
        ctx = models.contexts(v, pos)
        cum = ch.cdf[ctx, idx].ravel().tolist()
        nxt = ch.cdf[ctx, idx + 1].ravel().tolist()
        codes.extend(SymbolCode(c, n - c) for c, n in zip(cum, nxt))
    return codes


def encode_latent(latent: np.ndarray, models: EntropyModelSet) -> bytes:
    return rans_encode(latent_symbols(latent, models), validate=False)


def decode_latent(payload: bytes, models: EntropyModelSet, m_h: int, m_w: int) -> np.ndarray:
    """Inverse of :func:`encode_latent`; contexts use only decoded values."""
    dec = RansDecoder(payload)
    s = models.num_channels
    out = np.zeros((s, m_h, m_w), dtype=np.int64)
    prev_pred = None
    for pos, k in enumerate(models.order):
        ch = models.channels[k]
        split = (ACT_TOTAL - ch.act12) << 4
        cf = dec.peek()
        active = cf >= split
        dec.advance(*_activation_code(ch.act12, active))
        if not active:
            out[k] = ch.mpv_free
        else:
            rows = [r.tolist() for r in ch.cdf]
            eps, vmin = ch.threshold, ch.v_min
            use_spatial = models.variant != FACTORIZED
            use_inter = models.variant == K2 and prev_pred is not None
            plane = [[0] * m_w for _ in range(m_h)]
            for i in range(m_h):
                row = plane[i]
                above = plane[i - 1] if i else None
                inter_row = prev_pred[i] if use_inter else None
                for j in range(m_w):
                    ctx = 0
                    if use_spatial:
                        if above is not None and above[j] >= eps:
                            ctx += 1
                        if j and row[j - 1] >= eps:
                            ctx += 1
                        if inter_row is not None and inter_row[j]:
                            ctx += 1
                    cdf = rows[ctx]
                    cf = dec.peek()
                    sym = lookup(cdf, cf)
                    dec.advance(cdf[sym], cdf[sym + 1] - cdf[sym])
                    row[j] = sym + vmin
            out[k] = plane
        prev_pred = (out[k] >= ch.threshold).tolist()
    dec.finish()
    return out


# --------------------------------------------------------------------------
# image <-> tensors
# --------------------------------------------------------------------------


def pad_image(img: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate ``(h, w, 3)`` up to multiples of ``multiple``."""
    h, w, _ = img.shape
    ph, pw = -h % multiple, -w % multiple
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")


def image_to_input(img: np.ndarray) -> np.ndarray:
    """uint8 ``(h, w, 3)`` -> int16 ``(3, h, w)`` holding ``p / 255`` at shift 8."""
    p = np.asarray(img, dtype=np.int64).transpose(2, 0, 1)
    # round(p * 256 / 255), exact in integers
    return ((p * 512 + 255) // 510).astype(np.int16)


def output_to_pixels(out: np.ndarray, q_shift: int) -> np.ndarray:
    """Decoder output in ``[0, 2**q]`` -> uint8 with ties away from zero."""
    v = np.asarray(out, dtype=np.int64) * 255
    return np.clip(round_shift_away(v, q_shift), 0, 255).astype(np.uint8)


def latent_from_encoder_output(y: np.ndarray, q_shift: int) -> np.ndarray:
    """Nearest-integer quantization (ties away from zero) of a fixed-point latent."""
    return round_shift_away(y, q_shift)


def analysis(img: np.ndarray, encoder: ModelGraph) -> np.ndarray:
    """Pad, run the encoder and round: returns the unclamped integer latent."""
    if encoder.role != ENCODER:
        raise CodecError("analysis needs an encoder graph")
    t = encoder.total_stride
    h, w, _ = img.shape
    if h < t or w < t:
        raise CodecError(f"image {w}x{h} is smaller than the total stride {t}")
    x = image_to_input(pad_image(img, t))
    y = forward_batch(encoder, x[None])[0]
    return latent_from_encoder_output(y, encoder.output_shift)


def synthesis(latent: np.ndarray, decoder: ModelGraph, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Decode a ``(s, m_h, m_w)`` latent to a uint8 ``(h, w, 3)`` image (cropped)."""
    out = forward_batch(decoder, np.asarray(latent)[None])[0]
    px = output_to_pixels(out, decoder.output_shift).transpose(1, 2, 0)
    return px[:height, :width]


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)
    return float(np.mean(d * d))


def rd_cost(latent, decoder: ModelGraph, models: EntropyModelSet, lam: float, target: np.ndarray) -> float:
    """Full-image ``MSE(decode(latent), target) + lam * estimate_bits(latent)``."""
    h, w, _ = target.shape
    return mse(synthesis(latent, decoder, h, w), target) + lam * estimate_bits(latent, models)


# --------------------------------------------------------------------------
# pipelines
# --------------------------------------------------------------------------


@dataclass
class EncodeResult:
    bitstream: bytes
    latent: np.ndarray
    bits_estimate: float
    bpp: float
    psnr: float
    rd_cost: float
    clamped: int
    rdoq: object | None = None
    extra: dict = field(default_factory=dict)


def check_models(decoder: ModelGraph, models: EntropyModelSet) -> None:
    if decoder.role != DECODER:
        raise CodecError("decoder graph has the wrong role")
    if decoder.in_channels is not None and decoder.in_channels != models.num_channels:
        raise ModelMismatchError(
            f"decoder expects {decoder.in_channels} latent channels, entropy model has {models.num_channels}"
        )


def encode_image(
    img: np.ndarray,
    encoder: ModelGraph,
    decoder: ModelGraph,
    models: EntropyModelSet,
    lam: float,
    rdoq: bool = False,
    passes: int = 3,
    parallel: bool = False,
    lambda_tag: float | None = None,
) -> EncodeResult:
    """Encode an 8-bit RGB ``(h, w, 3)`` image into a QBIT bitstream.

    ``lam`` weighs bits against full-image MSE.  The header records the
    index of ``lambda_tag`` (default ``lam``) in :data:`LAMBDAS`.
    """

    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise CodecError("expected a (height, width, 3) uint8 image")
    check_models(decoder, models)
    raw = analysis(img, encoder)
    if raw.shape[0] != models.num_channels:
        raise ModelMismatchError(f"encoder produces {raw.shape[0]} channels, entropy model has {models.num_channels}")
    latent = models.clamp(raw)
    clamped = int(np.count_nonzero(latent != raw))
    stats = None
    if rdoq:
        from lcodec.rdoq import rdoq as run_rdoq

        latent, stats = run_rdoq(latent, decoder, models, lam, img, passes=passes, parallel=parallel)
    h, w, _ = img.shape
    s, m_h, m_w = latent.shape
    tag = lambda_index(lam if lambda_tag is None else lambda_tag)
    header = BitstreamHeader(w, h, tag, model_hash(decoder, models), m_h, m_w, s)
    data = Bitstream(header, encode_latent(latent, models)).to_bytes()
    bits = estimate_bits(latent, models)
    recon = synthesis(latent, decoder, h, w)
    cost = mse(recon, img) + lam * bits
    return EncodeResult(data, latent, bits, 8 * len(data) / (h * w), psnr(recon, img), cost, clamped, stats)


def decode_image(data: bytes, decoder: ModelGraph, models: EntropyModelSet, return_latent: bool = False):
    """Decode a QBIT bitstream to a uint8 ``(h, w, 3)`` image."""
    check_models(decoder, models)
    bs = Bitstream.from_bytes(data)
    hd = bs.header
    if hd.model_hash != model_hash(decoder, models):
        raise ModelMismatchError("bitstream was encoded with a different decoder / entropy model")
    if hd.s != models.num_channels:
        raise ModelMismatchError(f"bitstream has {hd.s} channels, model has {models.num_channels}")
    t = decoder.total_stride
    if hd.m_h * t < hd.height or hd.m_w * t < hd.width:
        raise FormatError("latent dimensions do not cover the image", 9)
    latent = decode_latent(bs.payload, models, hd.m_h, hd.m_w)
    img = synthesis(latent, decoder, hd.height, hd.width)
    return (img, latent) if return_latent else img
