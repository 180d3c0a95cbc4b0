"""Conditional sub-interval probabilities and a byte-oriented range coder.

The probability of sub-interval ``[b_k, b_k+1)`` given the parent interval
``[lb, ub]`` is the zero-mean Gaussian mass of the sub-interval divided by the
mass of the parent.  Probabilities are floored at ``P_MIN`` and quantized to
integer frequencies summing to ``2**16`` by largest-remainder apportionment;
the coder is a 32-bit range coder with carry propagation and byte-wise
renormalization.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DecodeError, DegeneratePMFError

__all__ = [
    "PRECISION_BITS",
    "TOTAL_FREQ",
    "P_MIN",
    "CDF_CLAMP",
    "gaussian_cdf",
    "SubIntervalPMF",
    "interval_pmf",
    "layer_pmf",
    "quantize_pmf",
    "RangeEncoder",
    "RangeDecoder",
    "encode_symbols",
    "decode_symbol",
    "ideal_rate",
    "encode_stream",
    "decode_stream",
    "StreamDecoder",
]

PRECISION_BITS = 16
TOTAL_FREQ = 1 << PRECISION_BITS
P_MIN = 1.0 / TOTAL_FREQ
CDF_CLAMP = 8.0
# parent intervals with less Gaussian mass than this cannot be modelled
UNDERFLOW_GUARD = 1e-300

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


def gaussian_cdf(x, sigma):
    """Zero-mean Gaussian CDF, clamped to its value at ``|x/sigma| = 8``."""
    z = np.clip(np.asarray(x, dtype=np.float64) / sigma, -CDF_CLAMP, CDF_CLAMP)
    out = ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def _mirrored_cdf(x, sigma, sign):
    # upper-tail evaluation (sign -1) for intervals right of zero keeps
    # differences of small numbers instead of differences of numbers close to one
    z = x / sigma
    z *= sign
    np.clip(z, -CDF_CLAMP, CDF_CLAMP, out=z)
    return ndtr(z, out=z)


def _raw_probs(bounds, sigma):
    """Conditional masses of every slot; rows are components."""
    flip = (bounds[:, 0] + bounds[:, -1]) > 0
    sign = np.where(flip, -1.0, 1.0)[:, None]
    F = _mirrored_cdf(bounds, sigma[:, None], sign)
    mass = np.diff(F, axis=1)
    mass *= sign
    denom = (F[:, -1] - F[:, 0]) * sign[:, 0]
    return mass, denom


def _floor_probs(p, valid):
    """Raise valid probabilities to ``P_MIN`` and rescale the rest.

    Rows needing no flooring are returned untouched.
    """
    p = np.where(valid, p, 0.0)
    floored = valid & (p < P_MIN)
    need = floored.any(axis=1)
    if not need.any():
        return p
    whole = bool(need.all())
    rows = slice(None) if whole else np.flatnonzero(need)
    sub = p[rows]
    sub_valid = valid[rows]
    fl = floored[rows]
    for _ in range(sub.shape[1] + 1):
        budget = 1.0 - P_MIN * fl.sum(axis=1)
        free = np.sum(sub, axis=1, where=~fl)
        scaled = sub * (budget / free)[:, None]
        np.copyto(scaled, P_MIN, where=fl)
        new_fl = sub_valid & (scaled < P_MIN) & ~fl
        if not new_fl.any():
            break
        fl |= new_fl
    scaled[~sub_valid] = 0.0
    if whole:
        return scaled
    p[rows] = scaled
    return p


def quantize_pmf(probs, valid):
    """Integer frequencies (total ``TOTAL_FREQ``, at least 1 per valid slot).

    Largest remainder apportionment of the ``TOTAL_FREQ - n`` spare counts;
    equal remainders go to the lower slot first.
    """
    probs = np.atleast_2d(probs)
    valid = np.atleast_2d(valid)
    n = valid.sum(axis=1)
    if np.any(n > TOTAL_FREQ) or np.any(n < 1):
        raise ValueError("each row needs between 1 and 2**16 valid slots")
    spare = (TOTAL_FREQ - n).astype(np.float64)
    q = np.where(valid, probs, 0.0) * spare[:, None]
    f = np.floor(q)
    rem = (spare - f.sum(axis=1)).astype(np.int64)
    frac = q - f
    frac[~valid] = -1.0
    # the rem-th largest remainder is the cut; ties at the cut go by index
    desc = np.sort(frac, axis=1)[:, ::-1]
    rows = np.arange(frac.shape[0])
    cut = desc[rows, np.maximum(rem - 1, 0)][:, None]
    above = frac > cut
    tie = frac == cut
    room = rem - above.sum(axis=1)
    take = above | (tie & (np.cumsum(tie, axis=1) <= room[:, None]))
    take &= (rem > 0)[:, None]
    return f.astype(np.int64) + take + valid


def layer_pmf(bounds, sigma, strict=True):
    """Floored conditional PMFs for a batch of boundary rows.

    Returns ``(probs, freqs)``, both shaped like the slot widths.  With
    ``strict=False`` a row whose parent interval has no Gaussian mass falls
    back to probabilities proportional to sub-interval width.
    """
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    valid = np.diff(bounds, axis=1) > 0
    mass, denom = _raw_probs(bounds, sigma)
    bad = ~(denom > UNDERFLOW_GUARD)
    if bad.any():
        if strict:
            row = int(np.flatnonzero(bad)[0])
            raise DegeneratePMFError(
                f"interval [{bounds[row, 0]}, {bounds[row, -1]}] has no mass "
                f"under sigma={sigma[row]}"
            )
        widths = np.diff(bounds, axis=1)
        mass = np.where(bad[:, None], widths, mass)
        denom = np.where(bad, bounds[:, -1] - bounds[:, 0], denom)
    p = np.where(valid, mass / denom[:, None], 0.0)
    p = np.maximum(p, 0.0)
    p = _floor_probs(p, valid)
    return p, quantize_pmf(p, valid)


@dataclass(frozen=True)
class SubIntervalPMF:
    """Probabilities over the valid slots of one boundary set."""

    support: tuple
    probs: np.ndarray
    freqs: np.ndarray

    def prob(self, k):
        try:
            return float(self.probs[self.support.index(k)])
        except ValueError:
            return 0.0

    def cum(self):
        return np.concatenate([[0], np.cumsum(self.freqs)])


def interval_pmf(bs, sigma, strict=True):
    """Conditional PMF of the sub-intervals of ``bs`` under ``N(0, sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    bounds = np.asarray(bs.bounds, dtype=np.float64)[None, :]
    p, f = layer_pmf(bounds, np.array([sigma]), strict=strict)
    support = tuple(int(j) for j in np.flatnonzero(np.diff(bounds[0]) > 0))
    return SubIntervalPMF(support, p[0, list(support)], f[0, list(support)])


def ideal_rate(symbols, pmfs):
    """Information content ``sum(-log2 p)`` of ``symbols`` under ``pmfs``."""
    bits = 0.0
    for k, pmf in zip(symbols, pmfs):
        p = pmf.prob(k)
        if p <= 0:
            raise ValueError(f"symbol {k} has zero probability")
        bits -= np.log2(p)
    return float(bits)


# -- range coder ---------------------------------------------------------------


class RangeEncoder:
    """Range encoder over ``2**16``-total frequency tables.

    ``low`` is kept to 33 bits; a carry out of bit 32 ripples into the pending
    ``0xFF`` run held in ``cache``/``cache_size``.
    """

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & _MASK32

    def encode(self, cum, freq):
        r = self.range >> PRECISION_BITS
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self):
        for _ in range(5):
            self._shift_low()
        # the first emitted byte is always the zero seed of the cache
        return bytes(self.out[1:])


class RangeDecoder:
    """Decoder for :class:`RangeEncoder` streams.

    Bytes past the end of ``data`` read as zero.  ``pos`` counts bytes pulled
    into the code register; a symbol decoded while ``pos <= len(data)`` is
    exact even when ``data`` is a truncated stream.
    """

    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        pos = self.pos
        self.pos = pos + 1
        return self.data[pos] if pos < len(self.data) else 0

    def decode(self, cum):
        """Decode one symbol against cumulative table ``cum`` (a list or a
        1-d integer array); returns the slot."""
        r = self.range >> PRECISION_BITS
        v = self.code // r
        if v >= TOTAL_FREQ:
            raise DecodeError("code value outside the frequency range")
        s = bisect_right(cum, v) - 1
        lo, hi = int(cum[s]), int(cum[s + 1])
        self.code -= r * lo
        self.range = r * (hi - lo)
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & _MASK32
        return s


def encode_symbols(symbols, pmfs, encoder):
    """Append ``symbols`` to ``encoder``; certain symbols cost nothing."""
    for k, pmf in zip(symbols, pmfs):
        if k not in pmf.support:
            raise ValueError(f"symbol {k} outside PMF support {pmf.support}")
        if len(pmf.support) == 1:
            continue
        s = pmf.support.index(k)
        cum = pmf.cum()
        encoder.encode(int(cum[s]), int(pmf.freqs[s]))


def decode_symbol(decoder, pmf):
    if len(pmf.support) == 1:
        return pmf.support[0]
    return pmf.support[decoder.decode(pmf.cum().tolist())]


def encode_stream(cum_lo, freq):
    """Encode a symbol sequence given per-symbol cumulative start and width.

    Returns the payload; an empty sequence gives an empty payload.
    """
    if len(cum_lo) == 0:
        return b""
    enc = RangeEncoder()
    # local copy of RangeEncoder.encode; this loop dominates encode time
    low, rng = enc.low, enc.range
    for c, f in zip(cum_lo, freq):
        r = rng >> PRECISION_BITS
        low += r * c
        rng = r * f
        while rng < _TOP:
            rng <<= 8
            enc.low = low
            enc._shift_low()
            low = enc.low
    enc.low, enc.range = low, rng
    return enc.finish()


class StreamDecoder:
    """Decodes one payload in consecutive runs of components.

    Bytes are only touched once a coded symbol is met.  After the first
    symbol that would need bytes beyond ``avail`` the decoder stops and every
    later run decodes nothing.
    """

    def __init__(self, data, avail=None):
        self.data = data
        self.avail = len(data) if avail is None else avail
        self.dec = None
        self.stopped = False

    def decode_run(self, cum_tables, coded):
        """Slots of the next ``len(coded)`` components.

        ``cum_tables[n]`` is the cumulative frequency list of component
        ``n`` and ``coded[n]`` is False for certain (single-slot) components,
        whose slot is reported as -1 and which consume no bits.  Returns
        ``(slots, count, positions)``: decoded slots, how many leading
        components are exact, and for each coded component the byte count
        it requires.
        """
        n_total = len(coded)
        slots = [-1] * n_total
        need = [0] * n_total
        if self.stopped:
            return slots, 0, need
        for n in range(n_total):
            if coded[n]:
                if self.dec is None:
                    self.dec = RangeDecoder(self.data)
                if self.dec.pos > self.avail:
                    self.stopped = True
                    return slots, n, need
                need[n] = self.dec.pos
                slots[n] = self.dec.decode(cum_tables[n])
        return slots, n_total, need


def decode_stream(data, cum_tables, coded, avail=None):
    """Decode slots for a sequence of components in one run (see
    :meth:`StreamDecoder.decode_run`); decoding stops before the first coded
    symbol that would need bytes beyond ``avail``."""
    return StreamDecoder(data, avail).decode_run(cum_tables, coded)
