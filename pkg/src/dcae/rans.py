"""rANS entropy coder over 16-bit quantized CDF tables.

State is 32 bits and renormalizes in 16-bit words. The encoder runs over the
symbols in reverse so the decoder reads forward. Stream layout:

    payload: 16-bit little-endian words in decode order
    trailer: 4-byte little-endian encoder final state

Decoding starts from the trailer state and must end at exactly ``RANS_L``
with every payload word consumed; anything else is a corrupt stream.

Each table covers a contiguous symbol range plus one escape bucket on either
side. An escaped symbol is followed by its overshoot magnitude as an order-0
Exp-Golomb code, one equiprobable bit per coder step, MSB first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, ndtr

from .errors import CorruptStreamError

PRECISION = 16
TOTAL = 1 << PRECISION
RANS_L = 1 << 16
_WORD_MASK = 0xFFFF
_MAX_EG_PREFIX = 40
_HALF = TOTAL >> 1


@dataclass(frozen=True)
class QuantizedCdf:
    """Integer table over ``[low, high]`` with escape buckets at both ends.

    ``freqs[0]`` is the below-range escape, ``freqs[-1]`` the above-range one.
    """

    low: int
    freqs: np.ndarray
    cdf: np.ndarray

    @classmethod
    def from_freqs(cls, low, freqs):
        freqs = np.asarray(freqs, dtype=np.int64)
        cdf = np.concatenate([[0], np.cumsum(freqs)])
        if cdf[-1] != TOTAL or np.any(freqs < 1):
            raise ValueError("frequencies must be >= 1 and total 2**16")
        return cls(int(low), freqs, cdf)

    @property
    def high(self):
        return self.low + len(self.freqs) - 3

    def bucket(self, symbol):
        """(bucket index, overshoot) for an integer symbol."""
        if symbol < self.low:
            return 0, self.low - 1 - symbol
        if symbol > self.high:
            return len(self.freqs) - 1, symbol - self.high - 1
        return symbol - self.low + 1, None

    def cost_bits(self, symbol):
        idx, overshoot = self.bucket(symbol)
        bits = PRECISION - math.log2(int(self.freqs[idx]))
        if overshoot is not None:
            bits += 2 * (overshoot + 1).bit_length() - 1
        return bits


def quantize_pmf(pmf):
    """Integer masses summing to 2**16, each >= 1, by largest-remainder rounding."""
    p = np.asarray(pmf, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty support")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("pmf entries must be finite and non-negative")
    if p.size > TOTAL:
        raise ValueError("support larger than the table precision")
    total = p.sum()
    if total > 1 + 1e-6:
        raise ValueError(f"pmf sums to {total} > 1")
    p = p / total if total > 0 else np.full(p.size, 1.0 / p.size)
    target = p * TOTAL
    freqs = np.maximum(np.floor(target).astype(np.int64), 1)
    residual = TOTAL - int(freqs.sum())
    if residual > 0:
        remainder = target - np.floor(target)
        # stable sort keeps ties in index order
        order = np.argsort(-remainder, kind="stable")
        freqs[order[:residual]] += 1
    while residual < 0:
        # floors of 1 overshot the total; take from the largest buckets
        order = np.argsort(-freqs, kind="stable")
        for idx in order:
            if residual == 0:
                break
            if freqs[idx] > 1:
                freqs[idx] -= 1
                residual += 1
    return freqs


# --------------------------------------------------------------------------
# Gaussian scale tables


SCALE_COUNT = 64
SCALE_MIN = 0.11
SCALE_MAX = 256.0
_TAIL = 2.0 ** -PRECISION


def support_radius(sigma):
    """Smallest r >= 1 whose upper tail mass beyond r + 1/2 is below 2**-16."""
    r = 1
    while ndtr(-(r + 0.5) / sigma) >= _TAIL:
        r += 1
    return r


def _gaussian_table(sigma):
    r = support_radius(sigma)
    k = np.arange(-r, r + 1, dtype=np.float64)
    a = np.abs(k)
    core = ndtr((0.5 - a) / sigma) - ndtr((-0.5 - a) / sigma)
    tail = ndtr(-(r + 0.5) / sigma)
    pmf = np.concatenate([[tail], core, [tail]])
    return QuantizedCdf.from_freqs(-r, quantize_pmf(pmf))


class ScaleTable:
    """64 log-spaced scales in [0.11, 256] with one precomputed table each.

    ``index`` maps a scale to the smallest table scale that is >= it, so the
    coded distribution is never narrower than the modelled one.
    """

    def __init__(self, count=SCALE_COUNT, lo=SCALE_MIN, hi=SCALE_MAX):
        self.scales = np.exp(np.linspace(np.log(lo), np.log(hi), count))
        self.tables = [_gaussian_table(s) for s in self.scales]

    def __len__(self):
        return len(self.scales)

    def index(self, sigma):
        idx = np.searchsorted(self.scales, np.asarray(sigma, dtype=np.float64), side="left")
        return np.minimum(idx, len(self.scales) - 1)

    def build_gaussian_cdf(self, index):
        return self.tables[int(index)]


@lru_cache(maxsize=1)
def default_scale_table():
    return ScaleTable()


def build_gaussian_cdf(index):
    return default_scale_table().build_gaussian_cdf(index)


def logistic_table(loc, scale):
    """Table for the binned logistic prior used on the hyper-latent."""
    loc, scale = float(loc), float(scale)
    reach = scale * math.log(TOTAL) + 1.0
    lo = math.floor(loc - reach)
    hi = math.ceil(loc + reach)
    k = np.arange(lo, hi + 1, dtype=np.float64)
    v = -np.abs(k - loc)
    core = expit((v + 0.5) / scale) - expit((v - 0.5) / scale)
    below = expit((lo - 0.5 - loc) / scale)
    above = expit((loc - hi - 0.5) / scale)
    pmf = np.concatenate([[below], core, [above]])
    return QuantizedCdf.from_freqs(lo, quantize_pmf(pmf))


# --------------------------------------------------------------------------
# coder


def _exp_golomb_bits(value):
    n = (value + 1).bit_length()
    return [0] * (n - 1) + [int(b) for b in format(value + 1, "b")]


def _ops(symbols, cdfs):
    """(start, freq) coder steps in decode order."""
    ops = []
    for symbol, table in zip(symbols, cdfs):
        idx, overshoot = table.bucket(int(symbol))
        ops.append((int(table.cdf[idx]), int(table.freqs[idx])))
        if overshoot is not None:
            ops.extend((bit * _HALF, _HALF) for bit in _exp_golomb_bits(overshoot))
    return ops


def rans_encode(symbols, cdfs):
    """Encode integer symbols, each with its own table, into bytes."""
    symbols = list(symbols)
    cdfs = list(cdfs)
    if len(symbols) != len(cdfs):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    state = RANS_L
    words = []
    for start, freq in reversed(_ops(symbols, cdfs)):
        limit = freq << 16
        while state >= limit:
            words.append(state & _WORD_MASK)
            state >>= 16
        state = ((state // freq) << PRECISION) + (state % freq) + start
    words.reverse()
    payload = np.asarray(words, dtype="<u2").tobytes()
    return payload + state.to_bytes(4, "little")


class _Reader:
    def __init__(self, stream):
        stream = bytes(stream)
        if len(stream) < 4 or (len(stream) - 4) % 2:
            raise CorruptStreamError(f"stream length {len(stream)} is not 4 + 2n bytes")
        self.words = np.frombuffer(stream[:-4], dtype="<u2").tolist()
        self.pos = 0
        self.state = int.from_bytes(stream[-4:], "little")
        if self.state < RANS_L:
            raise CorruptStreamError("initial state below the normalization bound")

    def pop(self, freqs_lookup):
        cf = self.state & _WORD_MASK
        idx, start, freq = freqs_lookup(cf)
        self.state = freq * (self.state >> PRECISION) + cf - start
        while self.state < RANS_L:
            if self.pos >= len(self.words):
                raise CorruptStreamError("stream exhausted")
            self.state = (self.state << 16) | self.words[self.pos]
            self.pos += 1
        return idx

    def bit(self):
        return self.pop(lambda cf: (cf >= _HALF, (cf >= _HALF) * _HALF, _HALF))

    def finish(self):
        if self.pos != len(self.words):
            raise CorruptStreamError(f"{len(self.words) - self.pos} payload words left unread")
        if self.state != RANS_L:
            raise CorruptStreamError("final state check failed")


def rans_decode(stream, cdfs, count=None):
    """Decode ``count`` symbols (default ``len(cdfs)``) coded with the same table sequence."""
    cdfs = list(cdfs)
    count = len(cdfs) if count is None else count
    if count != len(cdfs):
        raise ValueError(f"asked for {count} symbols with {len(cdfs)} tables")
    reader = _Reader(stream)
    out = np.empty(count, dtype=np.int64)
    for n, table in enumerate(cdfs):
        cdf = table.cdf

        def lookup(cf, cdf=cdf):
            idx = int(np.searchsorted(cdf, cf, side="right")) - 1
            return idx, int(cdf[idx]), int(cdf[idx + 1] - cdf[idx])

        idx = reader.pop(lookup)
        last = len(table.freqs) - 1
        if idx == 0 or idx == last:
            zeros = 0
            while reader.bit() == 0:
                zeros += 1
                if zeros > _MAX_EG_PREFIX:
                    raise CorruptStreamError("runaway escape code")
            value = 1
            for _ in range(zeros):
                value = (value << 1) | int(reader.bit())
            overshoot = value - 1
            out[n] = table.low - 1 - overshoot if idx == 0 else table.high + 1 + overshoot
        else:
            out[n] = table.low + idx - 1
    reader.finish()
    return out


def ideal_bits(symbols, cdfs):
    """Sum of -log2 of quantized-table probabilities, plus bypass bits for escapes."""
    return float(sum(t.cost_bits(int(s)) for s, t in zip(symbols, cdfs)))
