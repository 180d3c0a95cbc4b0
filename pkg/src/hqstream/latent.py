"""Latent tensors, Gaussian side parameters, step schedules and latent sources.

A latent tensor is a float64 ``numpy`` array of shape ``(C, H, W)``.  Flat
component index ``i`` follows C order (channel outermost), which is also the
order used by every serialized plane.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ScheduleError, ShapeError

__all__ = [
    "GaussianParams",
    "StepSchedule",
    "SourceConfig",
    "center",
    "uncenter",
    "sample_source",
    "validate_schedule",
    "trit_schedule",
    "store_latent",
    "load_latent",
    "read_importance",
    "HQL_MAGIC",
]

HQL_MAGIC = b"HQL1"
HQL_VERSION = 1
# high bit of the version byte flags an appended importance plane
HQL_IMPORTANCE_FLAG = 0x80

_HQL_HEADER = struct.Struct("<4sBIII")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianParams:
    """Per-component mean ``mu`` and scale ``sigma`` of the latent prior."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _frozen(self.mu)
        sigma = _frozen(self.sigma)
        if mu.shape != sigma.shape:
            raise ShapeError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("Gaussian parameters must be finite")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def shape(self):
        return self.mu.shape


@dataclass(frozen=True)
class StepSchedule:
    """Per-layer, per-channel quantization steps.

    ``delta`` and ``delta_inv`` have shape ``(L, C)``; ``gamma`` has shape
    ``(L,)``.  Construction does not validate; call :func:`validate_schedule`.
    """

    delta: np.ndarray
    delta_inv: np.ndarray = None
    gamma: np.ndarray = None

    def __post_init__(self):
        delta = np.atleast_2d(np.asarray(self.delta, dtype=np.float64))
        if delta.ndim != 2:
            raise ShapeError("delta must be a (layers, channels) table")
        delta_inv = delta if self.delta_inv is None else self.delta_inv
        delta_inv = np.atleast_2d(np.asarray(delta_inv, dtype=np.float64))
        if delta_inv.shape != delta.shape:
            raise ShapeError(
                f"delta_inv shape {delta_inv.shape} != delta shape {delta.shape}"
            )
        gamma = FULL_SELECTION_GAMMA if self.gamma is None else self.gamma
        gamma = np.broadcast_to(
            np.asarray(gamma, dtype=np.float64), (delta.shape[0],)
        )
        object.__setattr__(self, "delta", _frozen(delta))
        object.__setattr__(self, "delta_inv", _frozen(delta_inv))
        object.__setattr__(self, "gamma", _frozen(gamma))

    @property
    def n_layers(self):
        return self.delta.shape[0]

    @property
    def n_channels(self):
        return self.delta.shape[1]

    def replace(self, **changes):
        fields = {"delta": self.delta, "delta_inv": self.delta_inv, "gamma": self.gamma}
        fields.update(changes)
        return StepSchedule(**fields)

    def as_float32(self):
        """Round every table to the precision stored in containers."""
        return StepSchedule(
            self.delta.astype(np.float32).astype(np.float64),
            self.delta_inv.astype(np.float32).astype(np.float64),
            self.gamma.astype(np.float32).astype(np.float64),
        )


# Any gamma at or below this selects every component for latents of up to
# ~1e9 components (im >= 0.5/N and (0.5/N)**gamma >= 0.5).
FULL_SELECTION_GAMMA = 1e-6


@dataclass(frozen=True)
class SourceConfig:
    """Seeded synthetic Gaussian latent source.

    ``sigma_spread="channel"`` assigns each channel a base scale, log-spaced
    over ``sigma_range``, and jitters components around it by up to
    ``exp(+-jitter)``; ``"component"`` draws every scale log-uniformly over
    the full range.  Means are uniform on ``[-mu_scale, mu_scale]``.
    """

    shape: tuple = (4, 64, 64)
    sigma_range: tuple = (0.1, 10.0)
    sigma_spread: str = "channel"
    jitter: float = 0.25
    mu_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        lo, hi = (float(v) for v in self.sigma_range)
        if not 0 < lo <= hi:
            raise ValueError(f"invalid sigma_range {self.sigma_range}")
        if self.sigma_spread not in ("channel", "component"):
            raise ValueError(f"unknown sigma_spread {self.sigma_spread!r}")
        if self.jitter < 0 or self.mu_scale < 0:
            raise ValueError("jitter and mu_scale must be non-negative")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "sigma_range", (lo, hi))


def _check_same_shape(latent, params):
    if np.shape(latent) != params.shape:
        raise ShapeError(
            f"latent shape {np.shape(latent)} != parameter shape {params.shape}"
        )


def center(latent, params):
    """Shift the latent by its predicted mean: ``y* = y - mu``."""
    latent = np.asarray(latent, dtype=np.float64)
    _check_same_shape(latent, params)
    return latent - params.mu


def uncenter(unbiased, params):
    unbiased = np.asarray(unbiased, dtype=np.float64)
    _check_same_shape(unbiased, params)
    return unbiased + params.mu


def sample_source(cfg):
    """Draw ``(latent, params)`` from ``cfg``; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    C, H, W = cfg.shape
    lo, hi = cfg.sigma_range
    log_lo, log_hi = np.log(lo), np.log(hi)
    if cfg.sigma_spread == "channel":
        base = np.exp(np.linspace(log_lo, log_hi, C)) if C > 1 else np.full(1, np.sqrt(lo * hi))
        jit = rng.uniform(-cfg.jitter, cfg.jitter, size=(C, H, W))
        sigma = np.clip(base[:, None, None] * np.exp(jit), lo, hi)
    else:
        sigma = np.exp(rng.uniform(log_lo, log_hi, size=(C, H, W)))
        sigma = np.clip(sigma, lo, hi)
    mu = rng.uniform(-cfg.mu_scale, cfg.mu_scale, size=(C, H, W))
    latent = mu + sigma * rng.standard_normal((C, H, W))
    return latent, GaussianParams(mu, sigma)


def validate_schedule(s, n_channels=None):
    """Raise :class:`ScheduleError` at the first broken invariant.

    Entries are visited layer by layer, channel by channel, so the reported
    ``(layer, channel)`` is the first offender in that order.
    """
    delta, dinv, gamma = s.delta, s.delta_inv, s.gamma
    if n_channels is not None and delta.shape[1] != n_channels:
        raise ScheduleError(
            f"schedule has {delta.shape[1]} channels, latent has {n_channels}"
        )
    if delta.shape[0] < 1 or delta.shape[1] < 1:
        raise ScheduleError("schedule needs at least one layer and one channel")
    for l in range(delta.shape[0]):
        for c in range(delta.shape[1]):
            d = delta[l, c]
            if not (np.isfinite(d) and d > 0):
                raise ScheduleError(
                    f"delta[{l + 1}][{c}] = {d} is not positive", l + 1, c
                )
            if not (np.isfinite(dinv[l, c]) and dinv[l, c] > 0):
                raise ScheduleError(
                    f"delta_inv[{l + 1}][{c}] = {dinv[l, c]} is not positive", l + 1, c
                )
            if l > 0 and d > delta[l - 1, c]:
                raise ScheduleError(
                    f"delta[{l + 1}][{c}] = {d} exceeds delta[{l}][{c}] = "
                    f"{delta[l - 1, c]} (steps must not grow with the layer)",
                    l + 1,
                    c,
                )
        if not (np.isfinite(gamma[l]) and gamma[l] > 0):
            raise ScheduleError(f"gamma[{l + 1}] = {gamma[l]} is not positive", l + 1)


def trit_schedule(n_layers, n_channels, finest=1.0, gamma=FULL_SELECTION_GAMMA):
    """Handcrafted three-way hierarchy: every layer's step is a third of the last.

    With ``n_layers=5`` and ``finest=1`` this is the classic 81/27/9/3/1 ladder.
    """
    steps = finest * 3.0 ** np.arange(n_layers - 1, -1, -1, dtype=np.float64)
    delta = np.repeat(steps[:, None], n_channels, axis=1)
    return StepSchedule(delta, delta, np.full(n_layers, gamma))


# -- .hql latent files -------------------------------------------------------


def _plane_bytes(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FormatError("latent planes must be finite")
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def store_latent(latent, params, importance=None):
    """Serialize a latent and its Gaussian parameters to ``.hql`` bytes."""
    latent = np.asarray(latent, dtype=np.float64)
    _check_same_shape(latent, params)
    if latent.ndim != 3:
        raise ShapeError(f"latent must be (C, H, W), got shape {latent.shape}")
    C, H, W = latent.shape
    version = HQL_VERSION
    parts = [_plane_bytes(latent), _plane_bytes(params.mu), _plane_bytes(params.sigma)]
    if np.any(params.sigma.astype(np.float32) <= 0):
        raise FormatError("sigma underflows to zero at 32-bit precision")
    if importance is not None:
        importance = np.asarray(importance, dtype=np.float64)
        if importance.shape != latent.shape:
            raise ShapeError("importance plane must match the latent shape")
        if np.any((importance < 0) | (importance > 1)):
            raise FormatError("importance values must lie in [0, 1]")
        parts.append(_plane_bytes(importance))
        version |= HQL_IMPORTANCE_FLAG
    return _HQL_HEADER.pack(HQL_MAGIC, version, C, H, W) + b"".join(parts)


def _parse_hql(data):
    data = bytes(data)
    if len(data) < _HQL_HEADER.size:
        raise FormatError(f"truncated .hql header ({len(data)} bytes)")
    magic, version, C, H, W = _HQL_HEADER.unpack_from(data)
    if magic != HQL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {HQL_MAGIC!r}")
    if version & ~HQL_IMPORTANCE_FLAG != HQL_VERSION:
        raise FormatError(f"unsupported .hql version {version & 0x7F}")
    if min(C, H, W) < 1:
        raise FormatError(f"invalid shape ({C}, {H}, {W})")
    n = C * H * W
    n_planes = 4 if version & HQL_IMPORTANCE_FLAG else 3
    expected = _HQL_HEADER.size + 4 * n * n_planes
    if len(data) != expected:
        raise FormatError(
            f"payload is {len(data)} bytes, expected {expected} for shape ({C}, {H}, {W})"
        )
    planes = np.frombuffer(data, dtype="<f4", offset=_HQL_HEADER.size)
    planes = planes.astype(np.float64).reshape(n_planes, C, H, W)
    if not np.all(np.isfinite(planes)):
        raise FormatError("non-finite value in latent file")
    if np.any(planes[2] <= 0):
        raise FormatError("sigma plane must be strictly positive")
    return planes


def load_latent(data):
    """Parse ``.hql`` bytes into ``(latent, GaussianParams)``."""
    planes = _parse_hql(data)
    return planes[0].copy(), GaussianParams(planes[1], planes[2])


def read_importance(data):
    """Return the optional importance plane of a ``.hql`` file, or None."""
    planes = _parse_hql(data)
    if planes.shape[0] < 4:
        return None
    imp = planes[3]
    if np.any((imp < 0) | (imp > 1)):
        raise FormatError("importance values must lie in [0, 1]")
    return imp.copy()
