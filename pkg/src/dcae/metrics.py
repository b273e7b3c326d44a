"""Quality and rate metrics: PSNR, bits per pixel and the Bjontegaard delta rate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MetricUndefinedError

PSNR_CAP = 99.0


def psnr(a, b):
    """PSNR in dB between two 8-bit images; identical images report ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: image shapes differ, {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def bpp(n_bytes, width, height):
    """Bits per pixel of a file of ``n_bytes`` for an image of the original (unpadded) size."""
    if isinstance(n_bytes, (bytes, bytearray)):
        n_bytes = len(n_bytes)
    return 8.0 * n_bytes / (width * height)


@dataclass(frozen=True)
class RdCurve:
    """Rate-distortion points sorted by rate: bpp strictly increasing, at least four points."""

    bpp: tuple
    psnr: tuple

    def __post_init__(self):
        rate = np.asarray(self.bpp, dtype=np.float64)
        quality = np.asarray(self.psnr, dtype=np.float64)
        if rate.ndim != 1 or rate.shape != quality.shape:
            raise ValueError("bpp and psnr must be 1-D sequences of equal length")
        if len(rate) < 4:
            raise ValueError(f"an RD curve needs at least 4 points, got {len(rate)}")
        if np.any(rate <= 0) or not np.all(np.isfinite(rate)) or not np.all(np.isfinite(quality)):
            raise ValueError("rates must be positive and all values finite")
        if np.any(np.diff(rate) <= 0):
            raise ValueError("bpp must be strictly increasing")
        if np.any(np.diff(quality) <= 0):
            raise ValueError("psnr must be strictly increasing with rate")
        object.__setattr__(self, "bpp", tuple(float(v) for v in rate))
        object.__setattr__(self, "psnr", tuple(float(v) for v in quality))

    @classmethod
    def from_points(cls, points):
        pts = sorted((float(r), float(q)) for r, q in points)
        return cls(tuple(p[0] for p in pts), tuple(p[1] for p in pts))

    @classmethod
    def from_csv(cls, text):
        """Rows of ``bpp,psnr``; a non-numeric first row is treated as a header."""
        rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
        points = []
        for n, row in enumerate(rows):
            try:
                points.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if n == 0:
                    continue
                raise ValueError(f"bad curve row {n + 1}: {row!r}") from None
        return cls.from_points(points)

    def fit(self):
        """Cubic polynomial of natural-log rate as a function of PSNR."""
        return np.polyfit(self.psnr, np.log(self.bpp), 3)


def bd_rate(anchor, test):
    """Average rate difference of ``test`` over ``anchor`` in percent over the shared PSNR range.

    Negative means ``test`` needs fewer bits for the same quality.
    """
    lo = max(min(anchor.psnr), min(test.psnr))
    hi = min(max(anchor.psnr), max(test.psnr))
    if hi <= lo:
        raise MetricUndefinedError(
            f"curves do not overlap in PSNR (anchor {min(anchor.psnr):.2f}-{max(anchor.psnr):.2f} dB, "
            f"test {min(test.psnr):.2f}-{max(test.psnr):.2f} dB)"
        )
    p_anchor = np.polyint(anchor.fit())
    p_test = np.polyint(test.fit())
    area_anchor = np.polyval(p_anchor, hi) - np.polyval(p_anchor, lo)
    area_test = np.polyval(p_test, hi) - np.polyval(p_test, lo)
    mean_log_ratio = (area_test - area_anchor) / (hi - lo)
    return float(100.0 * np.expm1(mean_log_ratio))
