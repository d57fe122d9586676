"""Post-training context-switching entropy model for integer latents.

Each latent value ``v[k, i, j]`` is coded with one of four CDFs of its
channel ``k``.  The table is picked by counting how many of three causal
neighbours reach the channel threshold: the value above, the value to the
left, and the co-located value in the previously coded channel (compared
against that channel's own threshold).

Training happens offline on a dataset of latents, in this order:

1. per-channel thresholds minimizing the spatial-only (K1) entropy,
2. greedy channel ordering by conditional-entropy gain,
3. contextual histograms -> normalized, strictly increasing 16-bit CDFs,
4. per-channel activation probabilities.

Variants: ``"K2"`` is the full 4-context model, ``"K1"`` drops the
inter-channel neighbour (3 contexts) and ``"factorized"`` uses a single
context per channel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lcodec.errors import FormatError, SupportError
from lcodec.qtensor import QTensor

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
ACT_BITS = 12
ACT_TOTAL = 1 << ACT_BITS
NUM_CONTEXTS = 4

FACTORIZED = "factorized"
K1 = "K1"
K2 = "K2"
_VARIANT_CODES = {FACTORIZED: 0, K1: 1, K2: 2}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_CODES.items()}

QEMS_MAGIC = b"QEMS"
QEMS_VERSION = 1
_QEMS_HEADER = struct.Struct("<4sBBHHH")
_QEMS_CHANNEL = struct.Struct("<hhhH4hh")


def _as_array(latent) -> np.ndarray:
    if isinstance(latent, QTensor):
        return latent.data.astype(np.int64)
    return np.asarray(latent, dtype=np.int64)


# --------------------------------------------------------------------------
# contexts
# --------------------------------------------------------------------------


def context_from_predicates(top: bool, left: bool, inter: bool) -> int:
    """Context index from the three neighbour predicates.

    0 when none hold, 3 when all hold, 1 when exactly one holds, else 2.
    """
    if not (top or left or inter):
        return 0
    if top and left and inter:
        return 3
    if top ^ left ^ inter:
        return 1
    return 2


def spatial_predicates(plane: np.ndarray, eps: int) -> tuple[np.ndarray, np.ndarray]:
    """``(top >= eps, left >= eps)`` for every position of ``(..., h, w)``.

    Out-of-bounds neighbours count as below threshold.
    """
    ge = plane >= eps
    top = np.zeros(plane.shape, dtype=np.int64)
    left = np.zeros(plane.shape, dtype=np.int64)
    top[..., 1:, :] = ge[..., :-1, :]
    left[..., :, 1:] = ge[..., :, :-1]
    return top, left


def plane_contexts(plane, eps, prev_plane=None, prev_eps=None, variant: str = K2) -> np.ndarray:
    """Vectorized context map for one channel (any leading batch dims)."""
    plane = np.asarray(plane)
    if variant == FACTORIZED:
        return np.zeros(plane.shape, dtype=np.int64)
    top, left = spatial_predicates(plane, eps)
    ctx = top + left
    if variant == K2 and prev_plane is not None:
        ctx = ctx + (np.asarray(prev_plane) >= prev_eps)
    return ctx


def context_of(latent, i: int, j: int, pos: int, models: EntropyModelSet) -> int:
    """Context of ``latent[order[pos], i, j]`` under the 4-context rule."""
    v = _as_array(latent)
    k = models.order[pos]
    eps = models.channels[k].threshold
    top = i > 0 and v[k, i - 1, j] >= eps
    left = j > 0 and v[k, i, j - 1] >= eps
    inter = False
    if pos > 0:
        prev = models.order[pos - 1]
        inter = v[prev, i, j] >= models.channels[prev].threshold
    return context_from_predicates(bool(top), bool(left), bool(inter))


def context_k1(latent, i: int, j: int, k: int, eps: int) -> int:
    """Spatial-only context in {0, 1, 2}."""
    v = _as_array(latent)
    return int(i > 0 and v[k, i - 1, j] >= eps) + int(j > 0 and v[k, i, j - 1] >= eps)


# --------------------------------------------------------------------------
# model types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChannelEntropyModel:
    """Entropy model of one latent channel.

    ``cdf`` is ``(4, n + 1)`` cumulative frequencies over the support
    ``[v_min, v_max]`` (``n`` symbols), each row from 0 to 65536 and strictly
    increasing.  ``mpv`` holds the most probable value per context and
    ``mpv_free`` the most probable value of the context-merged histogram,
    which defines channel activity.  ``act12`` is the activation
    probability in units of 1/4096.
    """

    index: int
    threshold: int
    v_min: int
    v_max: int
    cdf: np.ndarray
    mpv: tuple[int, int, int, int]
    mpv_free: int
    act12: int

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.int64)
        n = self.v_max - self.v_min + 1
        if n < 1:
            raise ValueError("empty support")
        if cdf.shape != (NUM_CONTEXTS, n + 1):
            raise ValueError(f"cdf shape {cdf.shape} != {(NUM_CONTEXTS, n + 1)}")
        if np.any(cdf[:, 0] != 0) or np.any(cdf[:, -1] != CDF_TOTAL) or np.any(np.diff(cdf, axis=1) < 1):
            raise ValueError("cdf rows must run strictly increasing from 0 to 65536")
        if not 1 <= self.act12 <= ACT_TOTAL - 1:
            raise ValueError(f"act12 {self.act12} outside [1, 4095]")
        if not all(self.v_min <= m <= self.v_max for m in (*self.mpv, self.mpv_free)):
            raise ValueError("mpv outside support")
        cdf.setflags(write=False)
        object.__setattr__(self, "cdf", cdf)
        object.__setattr__(self, "mpv", tuple(int(m) for m in self.mpv))

    @property
    def size(self) -> int:
        return self.v_max - self.v_min + 1

    @property
    def act_prob(self) -> float:
        return self.act12 / ACT_TOTAL

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf, axis=1)

    def pmf(self, ctx: int, v: int) -> int:
        """Frequency (out of 65536) of value ``v`` under context ``ctx``."""
        if not self.v_min <= v <= self.v_max:
            raise SupportError(f"channel {self.index}: value {v} outside support [{self.v_min}, {self.v_max}]")
        s = v - self.v_min
        return int(self.cdf[ctx, s + 1] - self.cdf[ctx, s])

    def bit_costs(self) -> np.ndarray:
        """``-log2(pmf / 65536)`` as a ``(4, n)`` table."""
        return CDF_BITS - np.log2(self.freqs)

    def activation_bits(self, active: bool) -> float:
        p = self.act12 if active else ACT_TOTAL - self.act12
        return ACT_BITS - math.log2(p)

    def __eq__(self, other):
        if not isinstance(other, ChannelEntropyModel):
            return NotImplemented
        return (
            (self.index, self.threshold, self.v_min, self.v_max, self.mpv, self.mpv_free, self.act12)
            == (other.index, other.threshold, other.v_min, other.v_max, other.mpv, other.mpv_free, other.act12)
            and np.array_equal(self.cdf, other.cdf)
        )


@dataclass(frozen=True, eq=False)
class EntropyModelSet:
    order: tuple[int, ...]
    channels: tuple[ChannelEntropyModel, ...]
    latent_shape: tuple[int, int, int]
    variant: str = K2

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(o) for o in self.order))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "latent_shape", tuple(int(d) for d in self.latent_shape))
        s = len(self.channels)
        if sorted(self.order) != list(range(s)):
            raise ValueError("order must be a permutation of the channel indices")
        if self.latent_shape[0] != s:
            raise ValueError(f"latent_shape declares {self.latent_shape[0]} channels, model has {s}")
        if self.variant not in _VARIANT_CODES:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    @property
    def v_min(self) -> np.ndarray:
        return np.array([c.v_min for c in self.channels])

    @property
    def v_max(self) -> np.ndarray:
        return np.array([c.v_max for c in self.channels])

    @property
    def mpv_free(self) -> np.ndarray:
        return np.array([c.mpv_free for c in self.channels])

    def clamp(self, latent) -> np.ndarray:
        """Clamp each channel of ``(..., s, h, w)`` to its support."""
        v = _as_array(latent)
        lo = self.v_min[:, None, None]
        hi = self.v_max[:, None, None]
        return np.clip(v, lo, hi)

    def contexts(self, latent, pos: int, variant: str | None = None) -> np.ndarray:
        """Context map of channel ``order[pos]`` for a ``(..., s, h, w)`` latent."""
        variant = variant or self.variant
        v = _as_array(latent)
        k = self.order[pos]
        prev_plane = prev_eps = None
        if pos > 0:
            prev = self.order[pos - 1]
            prev_plane, prev_eps = v[..., prev, :, :], self.channels[prev].threshold
        return plane_contexts(v[..., k, :, :], self.channels[k].threshold, prev_plane, prev_eps, variant)

    def __eq__(self, other):
        if not isinstance(other, EntropyModelSet):
            return NotImplemented
        return (
            self.order == other.order
            and self.latent_shape == other.latent_shape
            and self.variant == other.variant
            and self.channels == other.channels
        )

    # QEMS layout, little-endian:
    #   magic "QEMS", version u8, variant u8, s u16, h u16, w u16
    #   order: s x u16
    #   per channel (by index): threshold i16, v_min i16, v_max i16, act12 u16,
    #     mpv 4 x i16, mpv_free i16, then 4 tables x n x u16 frequencies
    def to_bytes(self) -> bytes:
        s, h, w = self.latent_shape
        out = [_QEMS_HEADER.pack(QEMS_MAGIC, QEMS_VERSION, _VARIANT_CODES[self.variant], s, h, w)]
        out.append(np.asarray(self.order, dtype="<u2").tobytes())
        for ch in self.channels:
            if ch.size < 2:
                raise ValueError(f"channel {ch.index}: a one-symbol table cannot be stored as u16 frequencies")
            out.append(_QEMS_CHANNEL.pack(ch.threshold, ch.v_min, ch.v_max, ch.act12, *ch.mpv, ch.mpv_free))
            out.append(ch.freqs.astype("<u2").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> EntropyModelSet:
        if len(buf) < _QEMS_HEADER.size:
            raise FormatError("truncated QEMS header", len(buf))
        magic, version, vcode, s, h, w = _QEMS_HEADER.unpack_from(buf, 0)
        if magic != QEMS_MAGIC:
            raise FormatError(f"bad QEMS magic {magic!r}", 0)
        if version != QEMS_VERSION:
            raise FormatError(f"unsupported QEMS version {version}", 4)
        if vcode not in _VARIANT_NAMES:
            raise FormatError(f"unknown variant code {vcode}", 5)
        if s == 0:
            raise FormatError("QEMS declares zero channels", 6)
        off = _QEMS_HEADER.size
        if off + 2 * s > len(buf):
            raise FormatError("truncated channel order", off)
        order = np.frombuffer(buf, dtype="<u2", count=s, offset=off).tolist()
        if sorted(order) != list(range(s)):
            raise FormatError("channel order is not a permutation", off)
        off += 2 * s
        channels = []
        for k in range(s):
            if off + _QEMS_CHANNEL.size > len(buf):
                raise FormatError(f"truncated header of channel {k}", off)
            thr, vmin, vmax, act12, m0, m1, m2, m3, mfree = _QEMS_CHANNEL.unpack_from(buf, off)
            if vmax < vmin:
                raise FormatError(f"channel {k}: empty support [{vmin}, {vmax}]", off)
            chan_off = off
            off += _QEMS_CHANNEL.size
            n = vmax - vmin + 1
            if off + 2 * NUM_CONTEXTS * n > len(buf):
                raise FormatError(f"truncated CDF tables of channel {k}", off)
            freqs = np.frombuffer(buf, dtype="<u2", count=NUM_CONTEXTS * n, offset=off).astype(np.int64)
            off += 2 * NUM_CONTEXTS * n
            freqs = freqs.reshape(NUM_CONTEXTS, n)
            cdf = np.zeros((NUM_CONTEXTS, n + 1), dtype=np.int64)
            cdf[:, 1:] = np.cumsum(freqs, axis=1)
            try:
                channels.append(ChannelEntropyModel(k, thr, vmin, vmax, cdf, (m0, m1, m2, m3), mfree, act12))
            except ValueError as exc:
                raise FormatError(f"channel {k}: {exc}", chan_off) from None
        if off != len(buf):
            raise FormatError(f"{len(buf) - off} trailing bytes after QEMS", off)
        return cls(tuple(order), tuple(channels), (s, h, w), _VARIANT_NAMES[vcode])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> EntropyModelSet:
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# rate estimation
# --------------------------------------------------------------------------


def _symbol_bits(model: ChannelEntropyModel, ctx: np.ndarray, plane: np.ndarray) -> float:
    if plane.size and (plane.min() < model.v_min or plane.max() > model.v_max):
        raise SupportError(f"channel {model.index}: values outside support [{model.v_min}, {model.v_max}]")
    costs = model.bit_costs()
    return float(costs[ctx, plane - model.v_min].sum())


def channel_bits(latent, pos: int, models: EntropyModelSet, variant: str | None = None) -> float:
    """Bits spent on channel ``order[pos]``: activation bit plus symbols if active."""
    v = _as_array(latent)
    k = models.order[pos]
    model = models.channels[k]
    plane = v[k]
    active = bool(np.any(plane != model.mpv_free))
    bits = model.activation_bits(active)
    if active:
        bits += _symbol_bits(model, models.contexts(v, pos, variant), plane)
    return bits


def estimate_bits(latent, models: EntropyModelSet, variant: str | None = None) -> float:
    """Ideal code length in bits of a ``(s, h, w)`` latent.

    Sums ``-log2(pmf / 65536)`` over every coded value and the cost of each
    channel's activation bit; inactive channels cost only that bit.
    """
    v = _as_array(latent)
    if v.shape[0] != models.num_channels:
        raise ValueError(f"latent has {v.shape[0]} channels, model has {models.num_channels}")
    return sum(channel_bits(v, pos, models, variant) for pos in range(models.num_channels))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _stack_dataset(dataset) -> np.ndarray:
    items = [_as_array(x) for x in dataset]
    if not items:
        raise ValueError("latent dataset is empty")
    shape = items[0].shape
    if len(shape) != 3 or any(x.shape != shape for x in items):
        raise ValueError("all latents must share one (s, h, w) shape")
    return np.stack(items)


def conditional_entropy_bits(values: np.ndarray, contexts: np.ndarray) -> float:
    """Empirical ``sum -log2 p(value | context)`` over all samples (plug-in)."""
    values = np.asarray(values).ravel()
    contexts = np.asarray(contexts).ravel()
    if values.size == 0:
        return 0.0
    vmin = int(values.min())
    n = int(values.max()) - vmin + 1
    nctx = int(contexts.max()) + 1
    joint = np.bincount(contexts * n + (values - vmin), minlength=nctx * n).reshape(nctx, n)
    ctx_tot = joint.sum(axis=1, keepdims=True)
    nz = joint > 0
    return float(-(joint[nz] * np.log2((joint / np.maximum(ctx_tot, 1))[nz])).sum())


def k1_entropy_bits(plane: np.ndarray, eps: int) -> float:
    """Empirical K1 conditional entropy (bits) of a channel's values ``(N, h, w)``."""
    top, left = spatial_predicates(plane, eps)
    return conditional_entropy_bits(plane, top + left)


def k2_entropy_bits(plane: np.ndarray, eps: int, prev_plane: np.ndarray, prev_eps: int) -> float:
    return conditional_entropy_bits(plane, plane_contexts(plane, eps, prev_plane, prev_eps, K2))


def threshold_candidates(plane: np.ndarray) -> list[int]:
    vals = np.unique(plane)
    if vals.size <= 1:
        return [int(vals[0]) + 1]
    return [int(v) for v in vals[1:]]


def optimize_threshold(plane) -> int:
    """Threshold minimizing the channel's empirical K1 entropy.

    ``plane`` holds every value of one channel across the dataset,
    ``(N, h, w)``.  Search is exhaustive over the distinct observed values
    above the minimum (any other threshold induces one of the same
    partitions); the smallest candidate wins ties.
    """
    plane = np.asarray(plane, dtype=np.int64)
    if plane.size == 0:
        raise ValueError("empty channel")
    if plane.ndim == 2:
        plane = plane[None]
    best_eps, best_h = None, math.inf
    for eps in threshold_candidates(plane):
        h = k1_entropy_bits(plane, eps)
        if h < best_h:
            best_eps, best_h = eps, h
    return best_eps


def order_channels(dataset, thresholds) -> list[int]:
    """Greedy coding order.

    Starts with the channel of highest K1 entropy, then repeatedly appends
    the remaining channel whose K2 entropy given the last selected channel
    falls furthest below its own K1 entropy (lowest index on ties).
    """
    data = _stack_dataset(dataset)
    s = data.shape[1]
    h_k1 = [k1_entropy_bits(data[:, k], thresholds[k]) for k in range(s)]
    order = [int(np.argmax(h_k1))]
    remaining = [k for k in range(s) if k != order[0]]
    while remaining:
        last = order[-1]
        best, best_gain = None, math.inf
        for c in remaining:
            gain = k2_entropy_bits(data[:, c], thresholds[c], data[:, last], thresholds[last]) - h_k1[c]
            if gain < best_gain:
                best, best_gain = c, gain
        order.append(best)
        remaining.remove(best)
    return order


def normalize_frequencies(counts, total: int = CDF_TOTAL) -> np.ndarray:
    """Scale positive counts to integers summing to ``total``, each at least 1.

    Largest-remainder apportionment, then any zero bin takes one unit from
    the currently largest bin.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size > total or counts.sum() <= 0:
        raise ValueError("cannot normalize these counts")
    exact = counts * total / counts.sum()
    freq = np.floor(exact).astype(np.int64)
    short = total - int(freq.sum())
    if short:
        rem = exact - freq
        # stable sort: lower index first among equal remainders
        idx = np.argsort(-rem, kind="stable")[:short]
        freq[idx] += 1
    for z in np.flatnonzero(freq == 0):
        freq[int(np.argmax(freq))] -= 1
        freq[z] = 1
    return freq


def extract_cdfs(dataset, order, thresholds, variant: str = K2) -> EntropyModelSet:
    """Contextual histograms over a latent dataset, turned into CDF tables."""
    data = _stack_dataset(dataset)
    n_items, s, h, w = data.shape
    order = [int(o) for o in order]
    if sorted(order) != list(range(s)):
        raise ValueError("order must be a permutation of the channel indices")
    channels: list[ChannelEntropyModel | None] = [None] * s
    for pos, k in enumerate(order):
        plane = data[:, k]
        prev_plane = prev_eps = None
        if pos > 0:
            prev = order[pos - 1]
            prev_plane, prev_eps = data[:, prev], thresholds[prev]
        ctx = plane_contexts(plane, thresholds[k], prev_plane, prev_eps, variant)
        vmin, vmax = int(plane.min()) - 1, int(plane.max()) + 1
        n = vmax - vmin + 1
        hist = np.bincount((ctx * n + plane - vmin).ravel(), minlength=NUM_CONTEXTS * n).reshape(NUM_CONTEXTS, n)
        freqs = np.stack([normalize_frequencies(row + 1) for row in hist])
        cdf = np.zeros((NUM_CONTEXTS, n + 1), dtype=np.int64)
        cdf[:, 1:] = np.cumsum(freqs, axis=1)
        mpv_free = int(np.argmax(hist.sum(axis=0))) + vmin
        # a context never seen in training has no MPV of its own
        mpv = tuple(int(np.argmax(f)) + vmin if row.any() else mpv_free for f, row in zip(freqs, hist))
        active = np.any(plane.reshape(n_items, -1) != mpv_free, axis=1)
        act12 = min(max(int(math.floor(active.mean() * ACT_TOTAL + 0.5)), 1), ACT_TOTAL - 1)
        channels[k] = ChannelEntropyModel(k, int(thresholds[k]), vmin, vmax, cdf, mpv, mpv_free, act12)
    return EntropyModelSet(tuple(order), tuple(channels), (s, h, w), variant)


def train_entropy_model(dataset, variant: str = K2, skip_ordering: bool = False) -> EntropyModelSet:
    """Thresholds, then channel ordering, then CDFs and activation probabilities."""
    data = _stack_dataset(dataset)
    s = data.shape[1]
    if variant == FACTORIZED:
        thresholds = [0] * s
    else:
        thresholds = [optimize_threshold(data[:, k]) for k in range(s)]
    if skip_ordering or variant != K2:
        order = list(range(s))
    else:
        order = order_channels(data, thresholds)
    return extract_cdfs(data, order, thresholds, variant)
