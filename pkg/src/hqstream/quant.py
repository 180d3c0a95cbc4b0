"""Nested interval quantization with learned step sizes.

Every component carries an interval ``[lb, ub]`` and a reconstruction inside
it.  At each layer the interval is split into sub-intervals of the layer's
step, centred on the current reconstruction and clipped to the interval; the
component's value selects one of them and that sub-interval becomes the next
interval.

Sub-interval indices live in a fixed space of ``K`` slots (0-based; the signed
index is ``slot - (K - 1) // 2``).  Boundary ``j`` of a layer sits at
``(j - K/2) * step + recon`` before clipping, boundary 0 is pinned to ``lb``
and boundary ``K`` to ``ub``.  A component that enters after layer 1 starts
from the layer-1 interval and gets a wider slot space (:func:`entry_slots`)
so the layer's step tiles that interval instead of leaving two huge edge
sub-intervals.

Two flavours of every operation live here: scalar functions over a single
:class:`IntervalState`, which follow the definitions literally, and the
``layer_*`` functions, which process a whole layer of components at once over
a window of boundary slots.  Both compute boundaries with the same floating
point expression, so they agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, NestingError

__all__ = [
    "IntervalState",
    "BoundarySet",
    "QuantConfig",
    "init_interval",
    "choose_k_range",
    "nesting_k",
    "compute_boundaries",
    "adjust_boundaries",
    "quantize",
    "dequantize",
    "finalize",
    "entry_slots",
    "LayerBounds",
    "layer_boundaries",
    "layer_quantize",
    "layer_dequantize",
    "DEFAULT_THRESHOLD",
]

DEFAULT_THRESHOLD = 0.3

# Candidate boundaries closer than this many steps to lb/ub are snapped onto
# them; removes rounding slivers such as 3 * (1/3) != 1, including those left
# by 32-bit storage of the step tables.
SNAP_EPS = 1e-6

# Slot space of a late-entering component: enough steps to cover its layer-1
# interval, or ENTRY_TAIL scales either side of zero, whichever is smaller,
# never fewer than K and never more than MAX_SLOTS (16-bit coder tables).
ENTRY_TAIL = 8.0
MAX_SLOTS = 2**15 + 1

# Cells (rows x slots) processed at once by the layer engine's callers.
BLOCK_CELLS = 1 << 20


@dataclass(frozen=True)
class IntervalState:
    lb: float
    ub: float
    recon: float

    def __post_init__(self):
        if not self.lb < self.ub:
            raise ValueError(f"empty interval [{self.lb}, {self.ub}]")
        if not self.lb <= self.recon <= self.ub:
            raise ValueError(f"recon {self.recon} outside [{self.lb}, {self.ub}]")

    @property
    def width(self):
        return self.ub - self.lb


@dataclass(frozen=True)
class QuantConfig:
    K: int
    T: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        _check_k(self.K)
        if not 0 <= self.T <= 1:
            raise ValueError(f"threshold T must lie in [0, 1], got {self.T}")


@dataclass(frozen=True)
class BoundarySet:
    """The ``K + 1`` clipped boundaries of one component at one layer."""

    bounds: tuple
    step_used: float
    adjusted: bool = False

    @property
    def K(self):
        return len(self.bounds) - 1

    @property
    def k_offset(self):
        return (self.K - 1) // 2

    @property
    def lb(self):
        return self.bounds[0]

    @property
    def ub(self):
        return self.bounds[-1]

    @property
    def widths(self):
        b = self.bounds
        return tuple(b[j + 1] - b[j] for j in range(self.K))

    @property
    def valid(self):
        return tuple(j for j, w in enumerate(self.widths) if w > 0)

    @property
    def valid_count(self):
        return len(self.valid)


def _check_k(K):
    if int(K) != K or K < 1 or K % 2 == 0:
        raise ValueError(f"K must be a positive odd integer, got {K}")


def init_interval(delta1, K):
    """Layer-1 interval ``[-delta1 * K/2, delta1 * K/2]`` around a zero recon."""
    _check_k(K)
    if not delta1 > 0:
        raise ValueError("delta1 must be positive")
    half = delta1 * (K / 2)
    return IntervalState(-half, half, 0.0)


def choose_k_range(unbiased, schedule):
    """Smallest odd K whose layer-1 range covers every unbiased component."""
    unbiased = np.asarray(unbiased, dtype=np.float64)
    delta1 = schedule.delta[0].reshape((-1,) + (1,) * (unbiased.ndim - 1))
    if unbiased.size == 0:
        return 1
    mag = np.abs(unbiased)
    m = float(np.max(mag / delta1))
    K = 2 * max(0, math.ceil(m - 0.5)) + 1
    # guard the float edge: the range must contain every value as computed
    while np.any(mag > delta1 * (K / 2)):
        K += 2
    return K


def nesting_k(schedule):
    """Smallest odd K that lets each layer split its parent step without
    running out of sub-interval slots."""
    d = schedule.delta
    if d.shape[0] < 2:
        return 1
    ratio = float(np.max(d[:-1] / d[1:]))
    K = math.ceil(ratio) + 2
    return K if K % 2 else K + 1


def _odd_ceil(x):
    k = np.ceil(np.asarray(x, dtype=np.float64) - SNAP_EPS).astype(np.int64)
    return k + (k % 2 == 0)


def entry_slots(K, delta1, step, sigma):
    """Slot count for components first included at a layer after the first.

    They start from the layer-1 interval ``[-delta1*K/2, delta1*K/2]``; the
    result lets ``step`` tile that interval or ``+-ENTRY_TAIL*sigma``,
    whichever is narrower, clamped to ``[K, MAX_SLOTS]``.
    """
    _check_k(K)
    delta1, step, sigma = np.broadcast_arrays(
        np.asarray(delta1, dtype=np.float64),
        np.asarray(step, dtype=np.float64),
        np.asarray(sigma, dtype=np.float64),
    )
    cover = _odd_ceil(K * delta1 / step)
    tail = _odd_ceil(2 * ENTRY_TAIL * sigma / step)
    k = np.minimum(np.minimum(cover, tail), MAX_SLOTS)
    k = np.maximum(k, K)
    return int(k) if k.ndim == 0 else k


def block_slices(n, width, budget=BLOCK_CELLS):
    """Split ``n`` rows of about ``width`` cells into bounded blocks."""
    step = max(1, budget // max(int(width), 1))
    return [slice(a, min(a + step, n)) for a in range(0, n, step)]


def _scalar_bounds(lb, ub, recon, step, K):
    out = []
    for j in range(K + 1):
        if j == 0:
            out.append(lb)
            continue
        if j == K:
            out.append(ub)
            continue
        c = (j - 0.5 * K) * step + recon
        if c <= lb + SNAP_EPS * step:
            c = lb
        elif c >= ub - SNAP_EPS * step:
            c = ub
        out.append(c)
    return tuple(out)


def compute_boundaries(state, delta, K):
    """Clipped sub-interval boundaries of ``state`` for step ``delta``."""
    _check_k(K)
    if not delta > 0:
        raise ValueError("delta must be positive")
    return BoundarySet(_scalar_bounds(state.lb, state.ub, state.recon, delta, K), delta)


def _edge_ratio(widths, valid, step):
    first = widths[valid[0]]
    last = widths[valid[-1]]
    return min(first, last) / step


def adjust_boundaries(bs, delta, T, state):
    """Replace narrow edge sub-intervals with an expanded uniform partition.

    Fires when the narrower of the first/last valid sub-interval is below
    ``T * delta`` and at least three sub-intervals are valid; the expanded
    step spreads ``valid_count - 2`` steps over the parent interval.  Applied
    at most once.
    """
    valid = bs.valid
    if len(valid) < 3:
        return bs
    r = _edge_ratio(bs.widths, valid, delta)
    if not r < T:
        return bs
    step = (state.ub - state.lb) / (len(valid) - 2)
    bounds = _scalar_bounds(state.lb, state.ub, state.recon, step, bs.K)
    return BoundarySet(bounds, step, adjusted=True)


def quantize(y, bs):
    """Index of the sub-interval ``[b_k, b_k+1)`` holding ``y``.

    The topmost valid sub-interval is closed on the right.
    """
    b = bs.bounds
    if not b[0] <= y <= b[-1]:
        raise NestingError(f"value {y} escaped its interval [{b[0]}, {b[-1]}]")
    valid = bs.valid
    for j in valid:
        if b[j] <= y < b[j + 1]:
            return j
    return valid[-1]


def dequantize(k, bs):
    """Midpoint of sub-interval ``k`` and the state nested inside it."""
    if not 0 <= k < bs.K:
        raise DecodeError(f"sub-interval index {k} outside [0, {bs.K})")
    lo, hi = bs.bounds[k], bs.bounds[k + 1]
    if not hi > lo:
        raise DecodeError(f"sub-interval {k} has zero width")
    recon = (lo + hi) / 2
    return recon, IntervalState(lo, hi, recon)


def finalize(recon, mu, delta, delta_inv):
    """Final latent ``(recon + mu) / delta * delta_inv`` (per-channel steps
    broadcast over the trailing axes)."""
    recon = np.asarray(recon, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    delta_inv = np.asarray(delta_inv, dtype=np.float64)
    if delta.ndim == 1 and recon.ndim == 3:
        delta = delta[:, None, None]
        delta_inv = delta_inv[:, None, None]
    return (recon + mu) / delta * delta_inv


# -- vectorized layer engine ---------------------------------------------------


@dataclass
class LayerBounds:
    """Boundaries of many components over a window of slots.

    Row ``n`` covers slots ``start[n] .. start[n] + w - 1``; ``bounds[n, 0]``
    is always ``lb`` and ``bounds[n, -1]`` always ``ub``.  Slots outside the
    window (or past ``K``) are zero-width.
    """

    start: np.ndarray
    bounds: np.ndarray
    step: np.ndarray
    adjusted: np.ndarray

    @property
    def widths(self):
        return np.diff(self.bounds, axis=1)

    @property
    def valid(self):
        return self.widths > 0

    @property
    def valid_count(self):
        return self.valid.sum(axis=1)

    def __len__(self):
        return len(self.start)


def _window_bounds(lb, ub, recon, step, K):
    K = np.broadcast_to(np.asarray(K, dtype=np.int64), lb.shape)
    lo_f = (lb - recon) / step + 0.5 * K
    hi_f = (ub - recon) / step + 0.5 * K
    start = np.clip(np.floor(lo_f) - 2, 0, K - 1).astype(np.int64)
    stop = np.clip(np.ceil(hi_f) + 2, 1, K).astype(np.int64)
    w = int(np.max(stop - start)) if len(start) else 1
    j = start[:, None] + np.arange(w + 1)
    K = K[:, None]
    c = (j - 0.5 * K) * step[:, None] + recon[:, None]
    lo = lb[:, None]
    hi = ub[:, None]
    eps = SNAP_EPS * step[:, None]
    high = c >= hi - eps
    np.copyto(c, lo, where=c <= lo + eps)
    np.copyto(c, hi, where=high & (c > lo))
    c[:, 0] = np.where(start == 0, lb, c[:, 0])
    np.copyto(c, hi, where=j >= K)
    return start, c


def _pad_columns(bounds, width):
    extra = width + 1 - bounds.shape[1]
    if extra <= 0:
        return bounds
    return np.concatenate([bounds, np.repeat(bounds[:, -1:], extra, axis=1)], axis=1)


def layer_boundaries(lb, ub, recon, step, K, T=0.0):
    """Boundaries (with adjustment) for one layer of components; ``K`` may
    be a per-row array."""
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    start, bounds = _window_bounds(lb, ub, recon, step, K)
    adjusted = np.zeros(len(lb), dtype=bool)
    used = step.copy()
    if T > 0 and len(lb):
        widths = np.diff(bounds, axis=1)
        valid = widths > 0
        nv = valid.sum(axis=1)
        rows = np.arange(len(lb))
        first = np.argmax(valid, axis=1)
        last = widths.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
        r = np.minimum(widths[rows, first], widths[rows, last]) / step
        fire = (r < T) & (nv >= 3)
        if np.any(fire):
            idx = np.flatnonzero(fire)
            step2 = (ub[idx] - lb[idx]) / (nv[idx] - 2)
            K_idx = K[idx] if np.ndim(K) else K
            s2, b2 = _window_bounds(lb[idx], ub[idx], recon[idx], step2, K_idx)
            width = max(bounds.shape[1], b2.shape[1]) - 1
            bounds = _pad_columns(bounds, width)
            bounds[idx] = _pad_columns(b2, width)
            start = start.copy()
            start[idx] = s2
            used[idx] = step2
            adjusted[idx] = True
    return LayerBounds(start, bounds, used, adjusted)


def layer_quantize(y, lbs):
    """Slot index of every component's value (vector form of :func:`quantize`)."""
    y = np.asarray(y, dtype=np.float64)
    b = lbs.bounds
    if np.any((y < b[:, 0]) | (y > b[:, -1])):
        bad = int(np.flatnonzero((y < b[:, 0]) | (y > b[:, -1]))[0])
        raise NestingError(
            f"value {y[bad]} escaped its interval [{b[bad, 0]}, {b[bad, -1]}]"
        )
    w = b.shape[1] - 1
    local = np.sum(b[:, 1:] <= y[:, None], axis=1)
    valid = np.diff(b, axis=1) > 0
    last = w - 1 - np.argmax(valid[:, ::-1], axis=1)
    rows = np.arange(len(y))
    top = local >= w
    clipped = np.minimum(local, w - 1)
    top |= ~valid[rows, clipped]
    local = np.where(top, last, local)
    return lbs.start + local


def layer_dequantize(k, lbs):
    """Midpoints and child intervals for slot indices ``k``."""
    k = np.asarray(k, dtype=np.int64)
    local = k - lbs.start
    w = lbs.bounds.shape[1] - 1
    if np.any((local < 0) | (local >= w)):
        raise DecodeError("sub-interval index outside the boundary window")
    rows = np.arange(len(k))
    lo = lbs.bounds[rows, local]
    hi = lbs.bounds[rows, local + 1]
    if np.any(hi <= lo):
        raise DecodeError("decoded a zero-width sub-interval")
    return (lo + hi) / 2, lo, hi
