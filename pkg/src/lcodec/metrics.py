"""PSNR and Bjontegaard delta-rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_INF = math.inf


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """PSNR in dB over all pixels and channels; identical images give ``inf``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    m = float(np.mean(d * d))
    if m == 0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / m)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float


@dataclass(frozen=True)
class RDCurve:
    points: tuple[RDPoint, ...]
    label: str = ""

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        if len(pts) < 4:
            raise ValueError(f"an RD curve needs at least 4 points, got {len(pts)}")
        bpp = [p.bpp for p in pts]
        if bpp[0] <= 0 or any(b1 <= b0 for b0, b1 in zip(bpp, bpp[1:])):
            raise ValueError("RD curve bitrates must be positive and strictly increasing")
        if not all(math.isfinite(p.psnr) for p in pts):
            raise ValueError("RD curve PSNR values must be finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_arrays(cls, bpp, psnr_db, label: str = "") -> RDCurve:
        return cls(tuple(RDPoint(float(r), float(q)) for r, q in zip(bpp, psnr_db)), label)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate difference (percent) of ``test`` vs ``anchor`` at equal PSNR.

    Classical cubic-polynomial Bjontegaard: fit log(rate) as a cubic in
    PSNR for each curve and integrate the gap over the common PSNR range.
    Negative values mean ``test`` needs fewer bits.
    """
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise ValueError("RD curves have no overlapping PSNR range")
    # fitting around the centre of the range keeps the cubic well conditioned
    mid = (lo + hi) / 2
    i_anchor = np.polyint(np.polyfit(anchor.psnr - mid, np.log(anchor.bpp), 3))
    i_test = np.polyint(np.polyfit(test.psnr - mid, np.log(test.bpp), 3))
    area_anchor = np.polyval(i_anchor, hi - mid) - np.polyval(i_anchor, lo - mid)
    area_test = np.polyval(i_test, hi - mid) - np.polyval(i_test, lo - mid)
    avg_diff = (area_test - area_anchor) / (hi - lo)
    return float((math.exp(avg_diff) - 1.0) * 100.0)
