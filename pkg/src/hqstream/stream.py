"""Layered progressive container: encode, decode any prefix, truncate, measure.

Container layout (all integers little-endian)::

    "HQS1" | u8 version | u32 C, H, W | u8 L | u32 K | f32 T
    | f32 delta[L][C] | f32 delta_inv[L][C] | f32 gamma[L]
    | f32 mu[C*H*W] | f32 sigma[C*H*W] | u8 flags [| f32 importance[C*H*W]]
    | L x (u64 segment length | range-coded payload)

Flag bit 0 marks an importance plane driving selection; without it the
importance map is derived from the sigma plane.  Within a layer, components are
coded in :func:`plan_order` order, so any byte prefix decodes to an integer
number of layers plus a leading run of the next layer's components.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import entropy
from .errors import FormatError, ShapeError
from .latent import GaussianParams, StepSchedule, center, validate_schedule
from .quant import (
    DEFAULT_THRESHOLD,
    block_slices,
    choose_k_range,
    entry_slots,
    finalize,
    layer_boundaries,
    layer_dequantize,
    layer_quantize,
    nesting_k,
)
from .selection import importance_from_sigma, layer_masks

__all__ = [
    "HQS_MAGIC",
    "ContainerHeader",
    "OrderPlan",
    "plan_order",
    "interpolate_delta",
    "encode",
    "encode_with_trace",
    "decode",
    "truncate",
    "measure",
    "MeasureRow",
    "inspect_container",
    "parse_header",
    "point_to_count",
    "state_digest",
    "CSV_FIELDS",
]

HQS_MAGIC = b"HQS1"
HQS_VERSION = 1
FLAG_IMPORTANCE = 0x01

_FIXED = struct.Struct("<4sBIIIBIf")
_SEGLEN = struct.Struct("<Q")
# slack when turning a fractional progress point into a component count
_POINT_EPS = 1e-6


def _f32(a):
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class ContainerHeader:
    shape: tuple
    K: int
    T: float
    schedule: StepSchedule
    params: GaussianParams
    importance: np.ndarray = None

    @property
    def n_layers(self):
        return self.schedule.n_layers

    @property
    def n_components(self):
        return int(np.prod(self.shape))

    def to_bytes(self):
        C, H, W = self.shape
        s = self.schedule
        parts = [
            _FIXED.pack(HQS_MAGIC, HQS_VERSION, C, H, W, s.n_layers, self.K, self.T),
            s.delta.astype("<f4").tobytes(),
            s.delta_inv.astype("<f4").tobytes(),
            s.gamma.astype("<f4").tobytes(),
            self.params.mu.astype("<f4").tobytes(),
            self.params.sigma.astype("<f4").tobytes(),
            bytes([FLAG_IMPORTANCE if self.importance is not None else 0]),
        ]
        if self.importance is not None:
            parts.append(np.asarray(self.importance).astype("<f4").tobytes())
        return b"".join(parts)


def parse_header(data):
    """Parse the container header; returns ``(header, header_length)``."""
    data = memoryview(bytes(data))
    if len(data) < _FIXED.size:
        raise FormatError(f"truncated container header ({len(data)} bytes)")
    magic, version, C, H, W, L, K, T = _FIXED.unpack_from(data)
    if magic != HQS_MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {HQS_MAGIC!r}")
    if version != HQS_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if min(C, H, W) < 1 or L < 1 or K < 1 or K % 2 == 0:
        raise FormatError(f"invalid header fields C,H,W={C},{H},{W} L={L} K={K}")
    if not 0 <= T <= 1:
        raise FormatError(f"invalid threshold {T}")
    n = C * H * W
    off = _FIXED.size
    sizes = [L * C, L * C, L, n, n]
    need = off + 4 * sum(sizes) + 1
    if len(data) < need:
        raise FormatError(f"truncated container header ({len(data)} < {need} bytes)")
    tables = []
    for size in sizes:
        tables.append(np.frombuffer(data, dtype="<f4", count=size, offset=off).astype(np.float64))
        off += 4 * size
    flags = data[off]
    off += 1
    importance = None
    if flags & FLAG_IMPORTANCE:
        if len(data) < off + 4 * n:
            raise FormatError("truncated importance plane")
        importance = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        importance = importance.astype(np.float64).reshape(C, H, W)
        off += 4 * n
    if not all(np.all(np.isfinite(t)) for t in tables):
        raise FormatError("non-finite value in container header")
    schedule = StepSchedule(tables[0].reshape(L, C), tables[1].reshape(L, C), tables[2])
    try:
        validate_schedule(schedule)
        params = GaussianParams(tables[3].reshape(C, H, W), tables[4].reshape(C, H, W))
    except ValueError as exc:
        raise FormatError(f"invalid container header: {exc}") from exc
    header = ContainerHeader((C, H, W), K, float(T), schedule, params, importance)
    return header, off


def _segments(data, offset, n_layers):
    """``(start, declared, available)`` for each layer whose length field is
    complete in ``data``."""
    segs = []
    for _ in range(n_layers):
        if len(data) < offset + _SEGLEN.size:
            break
        (declared,) = _SEGLEN.unpack_from(data, offset)
        offset += _SEGLEN.size
        avail = min(declared, len(data) - offset)
        segs.append((offset, declared, avail))
        offset += declared
        if avail < declared:
            break
    return segs


# -- ordering and interpolation -----------------------------------------------


@dataclass(frozen=True)
class OrderPlan:
    """Coding order (flat component indices) of every layer."""

    layers: tuple

    def __getitem__(self, l):
        return self.layers[l]

    def __len__(self):
        return len(self.layers)


def plan_order(params, masks):
    """Per-layer coding order: components already selected at the previous
    layer first, then newly added ones, each group by descending sigma with
    ties broken by ascending flat index."""
    sigma = np.asarray(params.sigma if hasattr(params, "sigma") else params).ravel()
    n = sigma.size
    global_order = np.lexsort((np.arange(n), -sigma))
    prev = np.zeros(n, dtype=bool)
    layers = []
    for m in masks:
        bits = (m.bits if hasattr(m, "bits") else np.asarray(m, dtype=bool)).ravel()
        if np.any(prev & ~bits):
            raise ValueError("masks must be inclusive across layers")
        sel = bits[global_order]
        old = prev[global_order]
        layers.append(np.concatenate([global_order[sel & old], global_order[sel & ~old]]))
        prev = bits
    return OrderPlan(tuple(layers))


def interpolate_delta(schedule, l):
    """Geometric interpolation of ``(delta, delta_inv)`` at fractional layer ``l``."""
    L = schedule.n_layers
    if not 1 <= l <= L:
        raise ValueError(f"layer {l} outside [1, {L}]")
    lo = int(math.floor(l))
    t = l - lo
    d_lo, i_lo = schedule.delta[lo - 1], schedule.delta_inv[lo - 1]
    if t == 0:
        return d_lo.copy(), i_lo.copy()
    d_hi, i_hi = schedule.delta[lo], schedule.delta_inv[lo]
    return (
        d_lo ** (1 - t) * d_hi ** t,
        i_lo ** (1 - t) * i_hi ** t,
    )


def state_digest(lb, ub, recon):
    """Hash of a full set of interval states."""
    h = hashlib.sha256()
    for a in (lb, ub, recon):
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def point_to_count(point, sizes):
    """Split a progress point into ``(complete_layers, components_of_next)``."""
    L = len(sizes)
    if point >= L:
        return L, 0
    m = int(math.floor(point))
    count = int(math.floor((point - m) * sizes[m] + _POINT_EPS))
    return m, min(count, sizes[m])


def _achieved(m, count, sizes):
    if m >= len(sizes) or count == 0:
        return float(m)
    return m + count / sizes[m]


# -- shared layer machinery ----------------------------------------------------


class _Layout:
    """Everything both sides derive from the header."""

    def __init__(self, header):
        self.header = header
        s = header.schedule
        self.K = header.K
        self.T = header.T
        C, H, W = header.shape
        self.n = C * H * W
        self.channel = np.repeat(np.arange(C), H * W)
        self.sigma = header.params.sigma.ravel()
        im = header.importance
        if im is None:
            im = importance_from_sigma(header.params)
        self.masks = layer_masks(im, s.gamma)
        self.plan = plan_order(self.sigma, self.masks)
        self.sizes = [len(p) for p in self.plan]
        self.half1 = s.delta[0][self.channel] * (self.K / 2)

    def new_state(self):
        z = np.zeros(self.n)
        return {"lb": z.copy(), "ub": z.copy(), "recon": z.copy(), "active": np.zeros(self.n, dtype=bool)}

    def blocks(self, state, l):
        """Boundaries, PMFs and coding tables for layer ``l`` (0-based), one
        bounded block of the layer's order at a time."""
        idx = self.plan[l]
        active = state["active"][idx]
        # the order puts continuing components first
        n_cont = int(active.sum())
        delta = self.header.schedule.delta
        ch = self.channel[idx]
        step = delta[l][ch]
        K = np.full(len(idx), self.K, dtype=np.int64)
        if l:
            K[n_cont:] = entry_slots(self.K, delta[0][ch[n_cont:]], step[n_cont:], self.sigma[idx[n_cont:]])
        fresh = idx[n_cont:]
        state["lb"][fresh] = -self.half1[fresh]
        state["ub"][fresh] = self.half1[fresh]
        state["recon"][fresh] = 0.0
        state["active"][fresh] = True
        spans = []
        if n_cont:
            par = (state["ub"][idx[:n_cont]] - state["lb"][idx[:n_cont]]) / step[:n_cont]
            spans += block_slices(n_cont, np.ceil(np.max(par)) + 6)
        if len(fresh):
            spans += [
                slice(n_cont + b.start, n_cont + b.stop)
                for b in block_slices(len(fresh), int(np.max(K[n_cont:])) + 1)
            ]
        for rows in spans:
            yield self._block(state, rows, idx[rows], step[rows], K[rows])

    def _block(self, state, rows, idx, step, K):
        lbs = layer_boundaries(
            state["lb"][idx], state["ub"][idx], state["recon"][idx], step, K, self.T
        )
        probs, freqs = entropy.layer_pmf(lbs.bounds, self.sigma[idx], strict=False)
        cum = np.zeros((len(idx), freqs.shape[1] + 1), dtype=np.int64)
        np.cumsum(freqs, axis=1, out=cum[:, 1:])
        return _Block(rows, idx, lbs, probs, freqs, cum, lbs.valid_count > 1)

    @staticmethod
    def update(state, idx, lbs, slots, rows=None):
        if rows is not None:
            lbs = _take(lbs, rows)
            idx = idx[rows]
        recon, lo, hi = layer_dequantize(slots, lbs)
        state["lb"][idx] = lo
        state["ub"][idx] = hi
        state["recon"][idx] = recon
        return recon


@dataclass
class _Block:
    rows: slice
    idx: np.ndarray
    lbs: object
    probs: np.ndarray
    freqs: np.ndarray
    cum: np.ndarray
    coded: np.ndarray


def _take(lbs, rows):
    return type(lbs)(lbs.start[rows], lbs.bounds[rows], lbs.step[rows], lbs.adjusted[rows])


@dataclass
class LayerTrace:
    order: np.ndarray
    slots: np.ndarray
    coded: np.ndarray
    symbol_probs: np.ndarray
    valid_count: np.ndarray
    adjusted: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    recon: np.ndarray
    payload_bytes: int

    @property
    def digest(self):
        return state_digest(self.lb, self.ub, self.recon)

    @property
    def ideal_bits(self):
        return float(-np.sum(np.log2(self.symbol_probs[self.coded])))


@dataclass
class EncoderTrace:
    header: ContainerHeader
    header_bytes: int
    layers: list = field(default_factory=list)


def _prepare_inputs(latent, params, schedule, T, importance):
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise ShapeError(f"latent must be (C, H, W), got shape {latent.shape}")
    if latent.shape != params.shape:
        raise ShapeError(f"latent shape {latent.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(latent)):
        raise ValueError("latent must be finite")
    if not 0 <= T <= 1:
        raise ValueError(f"threshold T must lie in [0, 1], got {T}")
    # everything the decoder sees goes through 32-bit storage first
    schedule = schedule.as_float32()
    validate_schedule(schedule, n_channels=latent.shape[0])
    if schedule.n_layers > 255:
        raise ValueError("at most 255 layers fit the container")
    mu = _f32(params.mu)
    sigma = np.maximum(_f32(params.sigma), np.finfo(np.float32).tiny)
    q_params = GaussianParams(mu, sigma)
    if importance is not None:
        importance = _f32(importance)
        if importance.shape != latent.shape:
            raise ShapeError("importance map must match the latent shape")
        if np.any((importance < 0) | (importance > 1)):
            raise ValueError("importance values must lie in [0, 1]")
    T = float(np.float32(T))
    unbiased = center(latent, q_params)
    K = max(choose_k_range(unbiased, schedule), nesting_k(schedule))
    if K >= 1 << 32:
        raise ValueError("sub-interval count does not fit the container")
    header = ContainerHeader(latent.shape, K, T, schedule, q_params, importance)
    return header, unbiased.ravel()


def encode_with_trace(latent, params, schedule, T=DEFAULT_THRESHOLD, importance=None):
    """Encode and also return the encoder's per-layer state."""
    header, ystar = _prepare_inputs(latent, params, schedule, T, importance)
    layout = _Layout(header)
    head = header.to_bytes()
    trace = EncoderTrace(header, len(head))
    state = layout.new_state()
    chunks = [head]
    for l in range(header.n_layers):
        parts = []
        cum_lo, freq = [], []
        for b in layout.blocks(state, l):
            slots = layer_quantize(ystar[b.idx], b.lbs)
            rows = np.arange(len(b.idx))
            local = slots - b.lbs.start
            cum_lo += b.cum[rows, local][b.coded].tolist()
            freq += b.freqs[rows, local][b.coded].tolist()
            layout.update(state, b.idx, b.lbs, slots)
            parts.append((slots, b.coded, b.probs[rows, local], b.lbs.valid_count, b.lbs.adjusted))
        payload = entropy.encode_stream(cum_lo, freq)
        chunks.append(_SEGLEN.pack(len(payload)))
        chunks.append(payload)
        cat = [np.concatenate(a) if a else np.zeros(0) for a in zip(*parts)] or [np.zeros(0)] * 5
        trace.layers.append(
            LayerTrace(
                order=layout.plan[l],
                slots=cat[0].astype(np.int64),
                coded=cat[1].astype(bool),
                symbol_probs=cat[2],
                valid_count=cat[3].astype(np.int64),
                adjusted=cat[4].astype(bool),
                lb=state["lb"].copy(),
                ub=state["ub"].copy(),
                recon=state["recon"].copy(),
                payload_bytes=len(payload),
            )
        )
    return b"".join(chunks), trace


def encode(latent, params, schedule, T=DEFAULT_THRESHOLD, importance=None):
    """Encode a latent into a progressive container (bytes)."""
    return encode_with_trace(latent, params, schedule, T, importance)[0]


@dataclass
class DecodeResult:
    latent: np.ndarray
    unbiased: np.ndarray
    point: float
    complete_layers: int
    partial_count: int
    header: ContainerHeader
    header_bytes: int
    layer_slots: list
    need: list
    digests: list


def _decode(data, point=None):
    data = bytes(data)
    header, off = parse_header(data)
    layout = _Layout(header)
    L = header.n_layers
    if point is None:
        target = (L, 0)
    else:
        if not 0 <= point <= L:
            warnings.warn(f"point {point} clamped to [0, {L}]", stacklevel=3)
            point = min(max(point, 0.0), float(L))
        target = point_to_count(point, layout.sizes)
    state = layout.new_state()
    segs = _segments(data, off, L)
    m, count = 0, 0
    layer_slots, need_all, digests = [], [], []
    for l, (start, declared, avail) in enumerate(segs):
        if l > target[0] or (l == target[0] and target[1] == 0):
            break
        limit = layout.sizes[l] if l < target[0] else target[1]
        sd = entropy.StreamDecoder(data[start:start + avail], avail)
        got = 0
        slots, need = [], []
        for b in layout.blocks(state, l):
            if b.rows.start >= limit or sd.stopped:
                break
            k = min(b.rows.stop, limit) - b.rows.start
            coded = b.coded[:k]
            run, n_ok, pos = sd.decode_run(b.cum[:k], coded.tolist())
            local = np.asarray(run[:n_ok], dtype=np.int64)
            # certain components sit in their only valid slot
            local = np.where(coded[:n_ok], local, np.argmax(b.lbs.valid[:n_ok], axis=1))
            rows = np.arange(n_ok)
            block_slots = b.lbs.start[:n_ok] + local
            layout.update(state, b.idx, b.lbs, block_slots, rows)
            slots.append(block_slots)
            need += pos
            got += n_ok
            if n_ok < k:
                break
        slots = np.concatenate(slots) if slots else np.zeros(0, dtype=np.int64)
        layer_slots.append(slots)
        need_all.append(need)
        if got == layout.sizes[l]:
            m, count = l + 1, 0
            digests.append(state_digest(state["lb"], state["ub"], state["recon"]))
        else:
            m, count = l, got
            break
    achieved = _achieved(m, count, layout.sizes)
    unbiased = state["recon"].reshape(header.shape)
    mu = header.params.mu
    if achieved == 0:
        final = mu.copy()
    else:
        d, dinv = interpolate_delta(header.schedule, max(achieved, 1.0))
        final = finalize(unbiased, mu, d, dinv)
    return DecodeResult(
        final, unbiased, achieved, m, count, header, off, layer_slots, need_all, digests
    )


def decode(container, point=None):
    """Reconstruct the latent from a (possibly truncated) container.

    Returns ``(latent, achieved_point)``.  ``point`` caps the progress; the
    achieved point is lower when the bytes run out first.
    """
    r = _decode(container, point)
    return r.latent, r.point


def truncate(container, point=None, budget=None):
    """Prefix of ``container`` that decodes to ``point`` (snapped down to the
    nearest reachable component boundary) or to the first ``budget`` payload
    bytes after the header."""
    data = bytes(container)
    if (point is None) == (budget is None):
        raise ValueError("give exactly one of point or budget")
    header, off = parse_header(data)
    if budget is not None:
        if budget < 0:
            raise ValueError("budget must be non-negative")
        if off + budget > len(data):
            warnings.warn(
                f"budget {budget} exceeds the {len(data) - off} payload bytes; clamped",
                stacklevel=2,
            )
        return data[: off + budget]
    L = header.n_layers
    if point > L or point < 0:
        warnings.warn(f"point {point} clamped to [0, {L}]", stacklevel=2)
        point = min(max(point, 0.0), float(L))
    full = _decode(data, None)
    segs = _segments(data, off, L)
    sizes = _Layout(header).sizes
    m, count = point_to_count(point, sizes)
    m = min(m, len(segs))
    end = off if m == 0 else segs[m - 1][0] + segs[m - 1][1]
    if m >= len(segs) or count == 0:
        return data[:end]
    start, declared, avail = segs[m]
    need = full.need[m]
    coded_positions = [n for n in range(len(need)) if need[n] > 0]
    best = None
    prev_need = None
    for n in coded_positions:
        if n > count:
            break
        if prev_need is None or need[n] > prev_need:
            best = (n, need[n] - 1)
        prev_need = need[n]
    if count == sizes[m] and avail == declared:
        best = (count, declared)
    if best is None:
        return data[:end]
    return data[: start + min(best[1], avail)]


def inspect_container(container):
    """Header fields and segment table of a (possibly truncated) container."""
    data = bytes(container)
    header, off = parse_header(data)
    segs = _segments(data, off, header.n_layers)
    s = header.schedule
    return {
        "shape": header.shape,
        "layers": header.n_layers,
        "K": header.K,
        "T": header.T,
        "delta": s.delta.tolist(),
        "delta_inv": s.delta_inv.tolist(),
        "gamma": s.gamma.tolist(),
        "importance_plane": header.importance is not None,
        "header_bytes": off,
        "total_bytes": len(data),
        "segments": [{"declared": d, "available": a} for (_, d, a) in segs],
        "complete_segments": sum(1 for (_, d, a) in segs if a == d),
        "truncated": len(segs) < header.n_layers or any(a < d for (_, d, a) in segs),
    }


# -- measurement ----------------------------------------------------------------

CSV_FIELDS = ("point", "bpp", "msqe", "selection_ratio", "header_bytes", "payload_bytes")


@dataclass(frozen=True)
class MeasureRow:
    point: float
    bpp: float
    msqe: float
    selection_ratio: float
    header_bytes: int
    payload_bytes: int

    def to_csv(self):
        return ",".join(
            [
                f"{self.point:.9g}",
                f"{self.bpp:.9g}",
                f"{self.msqe:.9g}",
                f"{self.selection_ratio:.9g}",
                str(self.header_bytes),
                str(self.payload_bytes),
            ]
        )

    @classmethod
    def from_csv(cls, line):
        p, b, m, s, h, n = line.strip().split(",")
        return cls(float(p), float(b), float(m), float(s), int(h), int(n))

    def rounded(self):
        """The row as it reads back from CSV."""
        return MeasureRow.from_csv(self.to_csv())


def measure(container, latent, points=None):
    """Rate (bits per latent component), latent MSQE and selection ratio at
    each progress point; defaults to every integer layer."""
    data = bytes(container)
    header, off = parse_header(data)
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != header.shape:
        raise ShapeError(f"latent shape {latent.shape} != container shape {header.shape}")
    layout = _Layout(header)
    if points is None:
        points = list(range(1, header.n_layers + 1))
    n = layout.n
    rows = []
    for p in points:
        prefix = truncate(data, point=p)
        r = _decode(prefix)
        layer = min(int(math.ceil(r.point)), header.n_layers)
        sel = layout.masks[layer - 1].count / n if layer >= 1 else 0.0
        payload = len(prefix) - off
        rows.append(
            MeasureRow(
                point=r.point,
                bpp=8.0 * payload / n,
                msqe=float(np.mean((latent - r.latent) ** 2)),
                selection_ratio=sel,
                header_bytes=off,
                payload_bytes=payload,
            )
        )
    return rows
