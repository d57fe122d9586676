"""Inference-based rate-distortion optimized quantization of the latent.

Each latent value that is not already the most probable value of its
context is tried at ``v - 1`` and ``v + 1``.  The rate change is exact
(the value, its three context dependents and, when the channel's
activity flips, the whole channel).  The distortion change comes from
decoding only a small latent patch around the value and comparing the
central part of the output, half the decoder's receptive field wide and
centred on the value's output support, against the source pixels.  A
move is kept when ``dD + lam * dR < 0``.

After every pass the full-image cost is recomputed; a pass that made it
worse (possible only through crop truncation) is rolled back and the
search stops, so the returned latent never costs more than the input.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lcodec.codec import output_to_pixels, pad_image
from lcodec.entropy import FACTORIZED, K2, EntropyModelSet, channel_bits, estimate_bits
from lcodec.nn import ModelGraph, forward_batch, influence_footprint, influence_support


@dataclass
class RDState:
    latent: np.ndarray
    rate_bits: float
    distortion: float
    lam: float

    @property
    def cost(self) -> float:
        return self.distortion + self.lam * self.rate_bits


@dataclass
class RDOQStats:
    moves_per_pass: list[int] = field(default_factory=list)
    deactivations: int = 0
    probes: int = 0
    rolled_back: int = 0
    initial: RDState | None = None
    final: RDState | None = None


class _Search:
    """Shared, read-only state of one RDOQ run."""

    def __init__(self, decoder: ModelGraph, models: EntropyModelSet, lam: float, target: np.ndarray):
        self.decoder = decoder
        self.models = models
        self.lam = lam
        self.height, self.width, _ = target.shape
        self.npix = target.size
        self.stride = decoder.total_stride
        self.radius, extent = influence_footprint(decoder)
        # window of half the receptive field, centred where the value's output support is
        lo, hi = influence_support(decoder)
        centre, half = (lo + hi) / 2, extent // 4
        self.win_lo, self.win_hi = math.ceil(centre - half), math.floor(centre + half)
        self.out_shift = decoder.output_shift
        # padded so crops near the bottom/right never index past the array
        self.target = pad_image(target, self.stride).transpose(2, 0, 1).astype(np.int64)
        self.costs = [ch.bit_costs() for ch in models.channels]
        self.order = models.order
        self.variant = models.variant

    # -- rate ---------------------------------------------------------------

    def point_context(self, lat, pos, i, j) -> int:
        if self.variant == FACTORIZED:
            return 0
        k = self.order[pos]
        eps = self.models.channels[k].threshold
        ctx = int(i > 0 and lat[k, i - 1, j] >= eps) + int(j > 0 and lat[k, i, j - 1] >= eps)
        if self.variant == K2 and pos > 0:
            prev = self.order[pos - 1]
            ctx += int(lat[prev, i, j] >= self.models.channels[prev].threshold)
        return ctx

    def point_bits(self, lat, pos, i, j) -> float:
        k = self.order[pos]
        ch = self.models.channels[k]
        return self.costs[k][self.point_context(lat, pos, i, j), lat[k, i, j] - ch.v_min]

    def _dependents(self, lat, pos, i, j):
        _, h, w = lat.shape
        pts = [(pos, i, j)]
        if j + 1 < w:
            pts.append((pos, i, j + 1))
        if i + 1 < h:
            pts.append((pos, i + 1, j))
        return pts

    def rate_delta(self, lat, active, pos, i, j, new_v) -> float:
        """Exact change of ``estimate_bits`` if ``lat[order[pos], i, j]`` became ``new_v``.

        ``active`` is the per-channel count of values differing from the
        channel's context-free MPV.
        """
        k = self.order[pos]
        old = lat[k, i, j]
        mpv = self.models.channels[k].mpv_free
        count_after = active[k] - (old != mpv) + (new_v != mpv)
        was_active, now_active = active[k] > 0, count_after > 0
        nxt = pos + 1 if self.variant == K2 and pos + 1 < len(self.order) else None
        nxt_active = nxt is not None and active[self.order[nxt]] > 0

        def local_bits():
            if was_active == now_active:
                bits = sum(self.point_bits(lat, *p) for p in self._dependents(lat, pos, i, j)) if now_active else 0.0
            else:
                bits = channel_bits(lat, pos, self.models)
            if nxt_active:
                bits += self.point_bits(lat, nxt, i, j)
            return bits

        before = local_bits()
        lat[k, i, j] = new_v
        after = local_bits()
        lat[k, i, j] = old
        return after - before

    # -- distortion ---------------------------------------------------------

    def crop_bounds(self, lat, i, j):
        _, h, w = lat.shape
        r = self.radius
        return max(0, i - r), min(h, i + r + 1), max(0, j - r), min(w, j + r + 1)

    def crop_sse(self, patches, i0, j0, i, j) -> np.ndarray:
        """Squared error of each decoded patch over the central window around ``(i, j)``."""
        t = self.stride
        out = forward_batch(self.decoder, patches)
        ph, pw = out.shape[2], out.shape[3]
        ci, cj = i * t, j * t
        r0 = max(ci + self.win_lo, i0 * t, 0)
        r1 = min(ci + self.win_hi + 1, i0 * t + ph, self.height)
        c0 = max(cj + self.win_lo, j0 * t, 0)
        c1 = min(cj + self.win_hi + 1, j0 * t + pw, self.width)
        if r1 <= r0 or c1 <= c0:
            return np.zeros(len(patches))
        px = output_to_pixels(out[:, :, r0 - i0 * t : r1 - i0 * t, c0 - j0 * t : c1 - j0 * t], self.out_shift)
        d = px.astype(np.int64) - self.target[None, :, r0:r1, c0:c1]
        return (d * d).reshape(len(patches), -1).sum(axis=1)

    def distortion_deltas(self, lat, k, i, j, candidates) -> np.ndarray:
        """Cropped estimate of the change in full-image MSE for each candidate value."""
        i0, i1, j0, j1 = self.crop_bounds(lat, i, j)
        base = lat[:, i0:i1, j0:j1]
        patches = np.repeat(base[None], len(candidates) + 1, axis=0)
        for n, c in enumerate(candidates, start=1):
            patches[n, k, i - i0, j - j0] = c
        sse = self.crop_sse(patches, i0, j0, i, j)
        return (sse[1:] - sse[0]) / self.npix

    def full_state(self, lat) -> RDState:
        out = forward_batch(self.decoder, lat[None])[0]
        px = output_to_pixels(out, self.out_shift)[:, : self.height, : self.width]
        d = px.astype(np.int64) - self.target[:, : self.height, : self.width]
        return RDState(lat.copy(), estimate_bits(lat, self.models), float(np.mean(d * d)), self.lam)

    # -- search -------------------------------------------------------------

    def active_counts(self, lat) -> np.ndarray:
        mpv = self.models.mpv_free[:, None, None]
        return np.count_nonzero(lat != mpv, axis=(1, 2))

    def optimize_channel(self, lat, pos, stats: RDOQStats) -> int:
        """One raster sweep over channel ``order[pos]``; mutates ``lat``, returns moves."""
        k = self.order[pos]
        ch = self.models.channels[k]
        active = self.active_counts(lat)
        _, h, w = lat.shape
        moves = 0
        for i in range(h):
            for j in range(w):
                v = int(lat[k, i, j])
                if v == ch.mpv[self.point_context(lat, pos, i, j)]:
                    continue
                cands = [c for c in (v - 1, v + 1) if ch.v_min <= c <= ch.v_max]
                if not cands:
                    continue
                stats.probes += 1
                d_rate = np.array([self.rate_delta(lat, active, pos, i, j, c) for c in cands])
                d_dist = self.distortion_deltas(lat, k, i, j, cands)
                total = d_dist + self.lam * d_rate
                best = int(np.argmin(total))
                if total[best] < 0:
                    new = cands[best]
                    active[k] += (new != ch.mpv_free) - (v != ch.mpv_free)
                    lat[k, i, j] = new
                    moves += 1
        moves += self.try_deactivate(lat, pos, stats)
        return moves

    def try_deactivate(self, lat, pos, stats: RDOQStats) -> int:
        """Whole-channel move to the context-free MPV, checked once per sweep."""
        k = self.order[pos]
        mpv = self.models.channels[k].mpv_free
        changed = int(np.count_nonzero(lat[k] != mpv))
        if changed == 0:
            return 0
        trial = lat.copy()
        trial[k] = mpv
        touched = [pos] + ([pos + 1] if self.variant == K2 and pos + 1 < len(self.order) else [])
        d_rate = sum(channel_bits(trial, p, self.models) - channel_bits(lat, p, self.models) for p in touched)
        before, after = self.full_state(lat), self.full_state(trial)
        if after.distortion - before.distortion + self.lam * d_rate < 0:
            lat[k] = mpv
            stats.deactivations += 1
            return changed
        return 0


def rdoq(latent, decoder: ModelGraph, models: EntropyModelSet, lam: float, target: np.ndarray,
         passes: int = 3, parallel: bool = False, workers: int | None = None):
    """Optimize an integer latent for ``D + lam * R`` against ``target`` pixels.

    ``latent`` must already lie within the per-channel supports.  Returns
    ``(new_latent, RDOQStats)``; ``stats.final.cost`` never exceeds
    ``stats.initial.cost``.  ``parallel`` sweeps all channels concurrently
    against a snapshot of the latent and merges the results.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    search = _Search(decoder, models, lam, np.asarray(target))
    lat = np.array(latent, dtype=np.int64)
    state = search.full_state(lat)
    stats = RDOQStats(initial=state)
    for _ in range(passes):
        snapshot = lat.copy()
        if parallel:
            lat, moves = _parallel_pass(search, lat, state, stats, workers)
        else:
            moves = sum(search.optimize_channel(lat, pos, stats) for pos in range(len(models.order)))
        stats.moves_per_pass.append(moves)
        new_state = search.full_state(lat)
        if new_state.cost > state.cost:
            lat = snapshot
            stats.rolled_back += 1
            break
        state = new_state
        if moves == 0:
            break
    stats.final = state
    return lat, stats


def _parallel_pass(search: _Search, lat, state: RDState, stats: RDOQStats, workers):
    """Sweep every channel against the same snapshot, then reconcile.

    The merged latent is kept if its full cost did not grow; otherwise the
    per-channel results are folded in one by one, each kept only when it
    lowers the full cost.
    """
    s = len(search.order)

    def work(pos):
        local = lat.copy()
        local_stats = RDOQStats()
        search.optimize_channel(local, pos, local_stats)
        return search.order[pos], local[search.order[pos]], local_stats

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(work, range(s)))
    for _, _, st in results:
        stats.probes += st.probes
        stats.deactivations += st.deactivations
    merged = lat.copy()
    for k, plane, _ in results:
        merged[k] = plane
    if search.full_state(merged).cost <= state.cost:
        return merged, int(np.count_nonzero(merged != lat))
    cur, cur_cost = lat.copy(), state.cost
    for k, plane, _ in results:
        if np.array_equal(plane, cur[k]):
            continue
        trial = cur.copy()
        trial[k] = plane
        cost = search.full_state(trial).cost
        if cost < cur_cost:
            cur, cur_cost = trial, cost
    return cur, int(np.count_nonzero(cur != lat))
