"""Integer-only inference for the conv/ReLU encoder and deconv/ReLU decoder.

Accumulation is done in float64 BLAS calls on integer-valued operands.
Every partial sum is an integer of magnitude below 2**53, so the result is
exact; it is converted back to int64 before bias and requantization.
Callers never see floating point.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lcodec.errors import FormatError, ShapeError
from lcodec.qtensor import INT16_MAX, QTensor, requantize

CONV = "conv"
DECONV = "deconv"
RELU = "relu"
_KIND_CODES = {CONV: 0, DECONV: 1, RELU: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

ENCODER = "encoder"
DECODER = "decoder"
_ROLE_CODES = {ENCODER: 0, DECODER: 1}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}

QMDL_MAGIC = b"QMDL"
FMDL_MAGIC = b"FMDL"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sBBBBH")
_LAYER_HEADER = struct.Struct("<BHHBBBB")

ACC_LIMIT = 1 << 31


# --------------------------------------------------------------------------
# geometry shared by the integer path and the float reference in integerize
# --------------------------------------------------------------------------


def conv_out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def conv_accumulate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Strided cross-correlation with zero padding ``k // 2``, no bias.

    ``x`` is ``(n, c, h, w)``, ``w`` is ``(out, in, k, k)``; returns float64
    ``(n, out, ceil(h/stride), ceil(w/stride))``.
    """
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    oh, ow = conv_out_size(h, stride), conv_out_size(wd, stride)
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    wf = np.asarray(w, dtype=np.float64)
    out = np.zeros((o, n, oh, ow))
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride]
            out += np.tensordot(wf[:, :, ki, kj], patch, axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def deconv_accumulate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Transposed convolution producing exactly ``stride`` times the input size.

    Input pixel ``(y, x)`` scatters ``w[:, :, ki, kj]`` onto output
    ``(y*stride + ki - k//2, x*stride + kj - k//2)``; outputs falling outside
    ``[0, h*stride)`` are dropped.
    """
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    bh = max((h - 1) * stride + k, p + h * stride)
    bw = max((wd - 1) * stride + k, p + wd * stride)
    xf = np.asarray(x, dtype=np.float64)
    wf = np.asarray(w, dtype=np.float64)
    buf = np.zeros((o, n, bh, bw))
    for ki in range(k):
        for kj in range(k):
            buf[:, :, ki : ki + stride * (h - 1) + 1 : stride, kj : kj + stride * (wd - 1) + 1 : stride] += np.tensordot(
                wf[:, :, ki, kj], xf, axes=([1], [1])
            )
    return buf[:, :, p : p + h * stride, p : p + wd * stride].transpose(1, 0, 2, 3)


# --------------------------------------------------------------------------
# model description
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of an integerized network.

    ``weights`` is int16 ``(out, in, k, k)``; ``biases`` is int32 at the
    accumulator scale ``input_shift + w_shift``.  ReLU layers carry neither.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    w_shift: int = 0
    out_shift: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == RELU:
            return
        if self.kernel <= 0 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        expect = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        w = np.asarray(self.weights)
        if w.shape != expect:
            raise ValueError(f"weights shape {w.shape} != {expect}")
        b = np.asarray(self.biases)
        if b.shape != (self.out_channels,):
            raise ValueError(f"biases shape {b.shape} != ({self.out_channels},)")
        w = w.astype(np.int16)
        b = b.astype(np.int32)
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        if self.kind != other.kind:
            return False
        if self.kind == RELU:
            return True
        return (
            (self.in_channels, self.out_channels, self.kernel, self.stride, self.w_shift, self.out_shift)
            == (other.in_channels, other.out_channels, other.kernel, other.stride, other.w_shift, other.out_shift)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
        )


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    role: str
    input_shift: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.role not in _ROLE_CODES:
            raise ValueError(f"unknown role {self.role!r}")
        allowed = CONV if self.role == ENCODER else DECONV
        channels = None
        for idx, layer in enumerate(self.layers):
            if layer.kind == RELU:
                continue
            if layer.kind != allowed:
                raise ShapeError(f"{self.role} graph cannot contain a {layer.kind} layer", idx)
            if channels is not None and layer.in_channels != channels:
                raise ShapeError(f"expected {channels} input channels, layer declares {layer.in_channels}", idx)
            channels = layer.out_channels
        if self.role == ENCODER and self.layers and self.layers[-1].kind == RELU:
            raise ShapeError("encoder must end on a conv layer (the latent has no activation)", len(self.layers) - 1)

    @property
    def weighted_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind != RELU]

    @property
    def output_shift(self) -> int:
        wl = self.weighted_layers
        return wl[-1].out_shift if wl else self.input_shift

    @property
    def total_stride(self) -> int:
        return math.prod(l.stride for l in self.weighted_layers)

    @property
    def in_channels(self) -> int | None:
        wl = self.weighted_layers
        return wl[0].in_channels if wl else None

    @property
    def out_channels(self) -> int | None:
        wl = self.weighted_layers
        return wl[-1].out_channels if wl else None

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (
            self.role == other.role
            and self.input_shift == other.input_shift
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )

    def to_bytes(self) -> bytes:
        return write_model_table(QMDL_MAGIC, self.role, self.input_shift, self.layers, np.int16, np.int32)

    @classmethod
    def from_bytes(cls, buf: bytes) -> ModelGraph:
        role, input_shift, layers = read_model_table(buf, QMDL_MAGIC, "<i2", "<i4")
        return cls(tuple(LayerSpec(**l) for l in layers), role, input_shift)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> ModelGraph:
        return cls.from_bytes(Path(path).read_bytes())


def write_model_table(magic, role, input_shift, layers, wdtype, bdtype) -> bytes:
    """Shared QMDL/FMDL writer; ``wdtype``/``bdtype`` choose the payload type."""
    out = [_MODEL_HEADER.pack(magic, MODEL_VERSION, _ROLE_CODES[role], input_shift, 0, len(layers))]
    for layer in layers:
        if layer.kind == RELU:
            out.append(_LAYER_HEADER.pack(_KIND_CODES[RELU], 0, 0, 0, 0, 0, 0))
            continue
        out.append(
            _LAYER_HEADER.pack(
                _KIND_CODES[layer.kind],
                layer.in_channels,
                layer.out_channels,
                layer.kernel,
                layer.stride,
                getattr(layer, "w_shift", 0),
                getattr(layer, "out_shift", 0),
            )
        )
        out.append(np.asarray(layer.weights).astype(np.dtype(wdtype).newbyteorder("<")).tobytes())
        out.append(np.asarray(layer.biases).astype(np.dtype(bdtype).newbyteorder("<")).tobytes())
    return b"".join(out)


def read_model_table(buf: bytes, magic: bytes, wdtype: str, bdtype: str):
    """Parse a QMDL/FMDL buffer into ``(role, input_shift, [layer kwargs])``."""
    if len(buf) < _MODEL_HEADER.size:
        raise FormatError("truncated model header", len(buf))
    got, version, role_code, input_shift, _, count = _MODEL_HEADER.unpack_from(buf, 0)
    if got != magic:
        raise FormatError(f"bad model magic {got!r}, expected {magic!r}", 0)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    if role_code not in _ROLE_NAMES:
        raise FormatError(f"unknown role code {role_code}", 5)
    off = _MODEL_HEADER.size
    wsize, bsize = np.dtype(wdtype).itemsize, np.dtype(bdtype).itemsize
    layers = []
    for _ in range(count):
        if off + _LAYER_HEADER.size > len(buf):
            raise FormatError("truncated layer header", off)
        kind_code, cin, cout, k, s, w_shift, out_shift = _LAYER_HEADER.unpack_from(buf, off)
        if kind_code not in _KIND_NAMES:
            raise FormatError(f"unknown layer kind code {kind_code}", off)
        off += _LAYER_HEADER.size
        kind = _KIND_NAMES[kind_code]
        if kind == RELU:
            layers.append({"kind": RELU})
            continue
        nw = cout * cin * k * k
        if off + nw * wsize + cout * bsize > len(buf):
            raise FormatError("truncated layer payload", off)
        w = np.frombuffer(buf, dtype=wdtype, count=nw, offset=off).reshape(cout, cin, k, k)
        off += nw * wsize
        b = np.frombuffer(buf, dtype=bdtype, count=cout, offset=off)
        off += cout * bsize
        layers.append(
            dict(kind=kind, in_channels=cin, out_channels=cout, kernel=k, stride=s,
                 weights=w.copy(), biases=b.copy(), w_shift=w_shift, out_shift=out_shift)
        )
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after model", off)
    return _ROLE_NAMES[role_code], input_shift, layers


# --------------------------------------------------------------------------
# integer operations
# --------------------------------------------------------------------------


def apply_layer(x: np.ndarray, in_shift: int, layer: LayerSpec, index=None, debug: bool = False) -> np.ndarray:
    """Apply one layer to an int batch ``(n, c, h, w)`` held at ``in_shift``.

    Weighted layers return int16 at ``layer.out_shift``; ReLU keeps the shift.
    ``debug`` raises if a 32-bit accumulator would overflow.
    """
    if layer.kind == RELU:
        return np.maximum(x, 0)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"expected {layer.in_channels} input channels, got {x.shape[1]}", index)
    if layer.kind == CONV:
        acc = conv_accumulate(x, layer.weights, layer.stride)
    else:
        acc = deconv_accumulate(x, layer.weights, layer.stride)
    acc = np.rint(acc).astype(np.int64) + layer.biases.astype(np.int64)[None, :, None, None]
    if debug and acc.size and np.abs(acc).max() >= ACC_LIMIT:
        raise OverflowError(f"layer {index}: 32-bit accumulator overflow (max |acc| = {np.abs(acc).max()})")
    return requantize(acc, in_shift + layer.w_shift - layer.out_shift)


def conv2d_int(inp: QTensor, layer: LayerSpec, index: int | None = None, debug: bool = False) -> QTensor:
    if layer.kind != CONV:
        raise ShapeError(f"conv2d_int given a {layer.kind} layer", index)
    out = apply_layer(inp.data[None], inp.q_shift, layer, index, debug)
    return QTensor(out[0], layer.out_shift)


def deconv2d_int(inp: QTensor, layer: LayerSpec, index: int | None = None, debug: bool = False) -> QTensor:
    if layer.kind != DECONV:
        raise ShapeError(f"deconv2d_int given a {layer.kind} layer", index)
    out = apply_layer(inp.data[None], inp.q_shift, layer, index, debug)
    return QTensor(out[0], layer.out_shift)


def relu_int(inp: QTensor) -> QTensor:
    return QTensor(np.maximum(inp.data, 0), inp.q_shift)


def forward_batch(graph: ModelGraph, x: np.ndarray, debug: bool = False) -> np.ndarray:
    """Run ``graph`` on an int batch ``(n, c, h, w)`` at ``graph.input_shift``.

    Returns int16 ``(n, c', h', w')`` at ``graph.output_shift``; decoder
    outputs are clamped to ``[0, 2**output_shift]``.
    """
    y = np.asarray(x, dtype=np.int16)
    q = graph.input_shift
    for idx, layer in enumerate(graph.layers):
        if layer.kind == RELU:
            y = np.maximum(y, 0)
            continue
        y = apply_layer(y, q, layer, idx, debug)
        q = layer.out_shift
    if graph.role == DECODER and graph.weighted_layers:
        y = np.clip(y, 0, min(1 << q, INT16_MAX)).astype(np.int16)
    return y


def forward(graph: ModelGraph, inp: QTensor, debug: bool = False) -> QTensor:
    if inp.q_shift != graph.input_shift:
        raise ShapeError(f"input q_shift {inp.q_shift} != graph input_shift {graph.input_shift}")
    out = forward_batch(graph, inp.data[None], debug=debug)
    return QTensor(out[0], graph.output_shift)


def influence_footprint(graph: ModelGraph) -> tuple[int, int]:
    """Output width touched by one latent value, and the latent crop radius.

    Returns ``(latent_radius, output_extent)``.
    """
    if graph.role != DECODER:
        raise ValueError("influence_footprint needs a decoder graph")
    extent = 1
    for layer in graph.weighted_layers:
        extent = (extent - 1) * layer.stride + layer.kernel
    radius = math.ceil(extent / (2 * graph.total_stride))
    return radius, extent


def influence_support(graph: ModelGraph) -> tuple[int, int]:
    """Output offsets ``(lo, hi)``, relative to ``i * total_stride``, that latent ``i`` can reach.

    Unlike :func:`influence_footprint` this looks at which kernel taps are
    actually nonzero, so kernels with an off-centre support shift the range.
    """
    if graph.role != DECODER:
        raise ValueError("influence_support needs a decoder graph")
    lo = hi = 0
    for layer in graph.weighted_layers:
        used = np.any(layer.weights != 0, axis=(0, 1))
        # rows and columns share one range: a square bound on the 2-D support
        taps = np.flatnonzero(used.any(axis=1) | used.any(axis=0))
        p = layer.kernel // 2
        if taps.size == 0:
            return 0, -1
        lo = lo * layer.stride + int(taps[0]) - p
        hi = hi * layer.stride + int(taps[-1]) - p
    return lo, hi
