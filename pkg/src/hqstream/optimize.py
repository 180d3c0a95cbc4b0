"""Rate-distortion loss of a step schedule and a derivative-free schedule fit.

The loss of a schedule over ``L`` layers is ``sum_l R_l + lambda_l * D_l``.
``R_l`` is the rate in bits per latent component needed to reach layer ``l``
(cumulative) and ``D_l`` the mean squared error of the layer-``l``
reconstruction over all components.  Two evaluation modes exist:

``exact``
    Runs the nested quantizer and charges the ideal code length of every
    coded sub-interval symbol under the floored conditional PMF.
``surrogate``
    Replaces quantization by additive uniform noise and charges the Gaussian
    convolved with the uniform density.  Cheap and smooth, but blind to the
    nested structure.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .entropy import layer_pmf
from .latent import (
    FULL_SELECTION_GAMMA,
    GaussianParams,
    SourceConfig,
    StepSchedule,
    center,
    sample_source,
    trit_schedule,
    validate_schedule,
)
from .quant import (
    DEFAULT_THRESHOLD,
    block_slices,
    choose_k_range,
    entry_slots,
    layer_boundaries,
    layer_dequantize,
    layer_quantize,
    nesting_k,
)
from .selection import importance_from_sigma, layer_masks

__all__ = [
    "LossConfig",
    "LossReport",
    "FitResult",
    "default_lambdas",
    "rate_term",
    "distortion_term",
    "total_loss",
    "optimize_schedule",
    "fit_schedule",
    "best_trit_schedule",
    "DELTA_INV_BOUND",
]

log = logging.getLogger(__name__)

# delta_inv stays within this relative distance of delta
DELTA_INV_BOUND = 0.25
_GOLDEN = (math.sqrt(5) - 1) / 2
_TINY = 1e-300


def default_lambdas(n_layers, base=0.2):
    """``base * 2 ** (l - 8)`` for ``l = 1..n_layers``."""
    return base * 2.0 ** (np.arange(1, n_layers + 1) - 8)


@dataclass(frozen=True)
class LossConfig:
    lambda_base: float = 0.2
    lambdas: tuple = None
    mode: str = "exact"
    samples: int = 1
    seed: int = 0
    T: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.mode not in ("exact", "surrogate"):
            raise ValueError(f"mode must be 'exact' or 'surrogate', got {self.mode!r}")
        if not self.lambda_base > 0:
            raise ValueError("lambda_base must be positive")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if not 0 <= self.T <= 1:
            raise ValueError("T must lie in [0, 1]")
        if self.lambdas is not None:
            lam = tuple(float(x) for x in self.lambdas)
            if any(not (x >= 0 and math.isfinite(x)) for x in lam):
                raise ValueError("lambdas must be finite and non-negative")
            object.__setattr__(self, "lambdas", lam)

    def lambdas_for(self, n_layers):
        if self.lambdas is None:
            return default_lambdas(n_layers, self.lambda_base)
        if len(self.lambdas) != n_layers:
            raise ValueError(f"{len(self.lambdas)} lambdas for {n_layers} layers")
        return np.asarray(self.lambdas, dtype=np.float64)


@dataclass(frozen=True)
class LossReport:
    rate: np.ndarray
    distortion: np.ndarray
    lambdas: np.ndarray

    @property
    def total(self):
        return float(np.sum(self.rate + self.lambdas * self.distortion))

    @property
    def n_layers(self):
        return len(self.rate)


# -- per-channel statistics -----------------------------------------------------


@dataclass
class _ChannelStats:
    """Bits and reconstruction moments of one channel, per layer.

    ``syr`` and ``srr`` are the inner products of the target with ``r`` and of
    ``r`` with itself, where ``r = recon + mu`` is the final latent before the
    ``delta_inv / delta`` rescaling, so the squared error for any ratio ``a``
    is ``syy - 2 a syr + a^2 srr``.
    """

    bits: np.ndarray
    syy: float
    syr: np.ndarray
    srr: np.ndarray

    def sq_error(self, ratio):
        return self.syy - 2 * ratio * self.syr + ratio**2 * self.srr


def _moments(y, mu, recon_layers):
    r = recon_layers + mu[None, :]
    return float(y @ y), r @ y, np.einsum("ij,ij->i", r, r)


def _exact_pass(y, mu, sigma, sel, delta, K, T):
    """Nested quantization of one channel; ``sel`` is ``(L, n)``."""
    ystar = y - mu
    n = y.size
    L = len(delta)
    lb = np.zeros(n)
    ub = np.zeros(n)
    recon = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    half = delta[0] * (K / 2)
    bits = np.zeros(L)
    layers = np.zeros((L, n))
    for l in range(L):
        idx = np.flatnonzero(sel[l])
        if idx.size:
            fresh = ~active[idx]
            f = idx[fresh]
            lb[f], ub[f], recon[f] = -half, half, 0.0
            active[f] = True
            Ks = np.full(idx.size, K, dtype=np.int64)
            if l:
                Ks[fresh] = entry_slots(K, delta[0], delta[l], sigma[f])
            width = int(np.max(Ks)) + 1 if fresh.any() else 0
            if (~fresh).any():
                par = np.max(ub[idx[~fresh]] - lb[idx[~fresh]]) / delta[l]
                width = max(width, int(np.ceil(par)) + 6)
            for rows in block_slices(idx.size, width):
                ix = idx[rows]
                lbs = layer_boundaries(
                    lb[ix], ub[ix], recon[ix], np.full(ix.size, delta[l]), Ks[rows], T
                )
                slots = layer_quantize(ystar[ix], lbs)
                probs, _ = layer_pmf(lbs.bounds, sigma[ix], strict=False)
                p = probs[np.arange(ix.size), slots - lbs.start]
                coded = lbs.valid_count > 1
                bits[l] -= np.sum(np.log2(p[coded]))
                recon[ix], lb[ix], ub[ix] = layer_dequantize(slots, lbs)
        layers[l] = recon
    syy, syr, srr = _moments(y, mu, layers)
    return _ChannelStats(np.cumsum(bits), syy, syr, srr)


def _surrogate_bits(t, s):
    """``-log2`` of the unit-width Gaussian-convolved-uniform mass at ``t``."""
    a = (t - 0.5) / s
    b = (t + 0.5) / s
    flip = t > 0
    p = np.where(flip, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return -np.log2(np.maximum(p, _TINY))


def _surrogate_pass(y, mu, sigma, sel, delta, noise):
    """Noisy-latent stand-in for the nested quantizer; ``noise`` is
    ``(samples, L, n)`` uniform on ``[-0.5, 0.5)``."""
    ystar = y - mu
    S, L, n = noise.shape
    bits = np.zeros(L)
    syr = np.zeros(L)
    srr = np.zeros(L)
    for l in range(L):
        m = sel[l]
        t = ystar[m] / delta[l] + noise[:, l, m]
        bits[l] = _surrogate_bits(t, sigma[m] / delta[l]).sum() / S
        r = np.broadcast_to(mu, (S, n)).copy()
        r[:, m] += t * delta[l]
        syr[l] = np.sum(r @ y) / S
        srr[l] = np.sum(r * r) / S
    return _ChannelStats(bits, float(y @ y), syr, srr)


# -- evaluation problem ---------------------------------------------------------


class _Problem:
    """One latent prepared for repeated loss evaluation."""

    def __init__(self, latent, params, cfg, n_layers):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape != params.shape:
            raise ValueError("latent and params must share a (C, H, W) shape")
        # evaluate exactly what a container would carry
        mu = params.mu.astype(np.float32).astype(np.float64)
        sigma = np.maximum(
            params.sigma.astype(np.float32).astype(np.float64), np.finfo(np.float32).tiny
        )
        self.params = GaussianParams(mu, sigma)
        self.latent = latent
        self.shape = latent.shape
        self.C = latent.shape[0]
        self.n = latent.size
        self.ystar = center(latent, self.params)
        self.importance = importance_from_sigma(self.params)
        self.cfg = cfg
        self.T = float(np.float32(cfg.T))
        self.L = n_layers
        self._masks = {}
        self._stats = {}
        self.evaluations = 0
        if cfg.mode == "surrogate":
            rng = np.random.default_rng(cfg.seed)
            self.noise = rng.uniform(-0.5, 0.5, size=(cfg.samples, n_layers) + latent.shape)

    def masks(self, gamma):
        key = tuple(gamma)
        if key not in self._masks:
            ms = layer_masks(self.importance, gamma)
            self._masks[key] = np.stack([m.bits for m in ms])
        return self._masks[key]

    def K(self, schedule):
        return max(choose_k_range(self.ystar, schedule), nesting_k(schedule))

    def channel(self, c, schedule, K):
        key = (c, K, tuple(schedule.delta[:, c]), tuple(schedule.gamma))
        st = self._stats.get(key)
        if st is None:
            self.evaluations += 1
            sel = self.masks(schedule.gamma)[:, c].reshape(self.L, -1)
            y = self.latent[c].ravel()
            mu = self.params.mu[c].ravel()
            sigma = self.params.sigma[c].ravel()
            delta = schedule.delta[:, c]
            if self.cfg.mode == "exact":
                st = _exact_pass(y, mu, sigma, sel, delta, K, self.T)
            else:
                noise = self.noise[:, :, c].reshape(self.cfg.samples, self.L, -1)
                st = _surrogate_pass(y, mu, sigma, sel, delta, noise)
            self._stats[key] = st
        return st

    def report(self, schedule):
        schedule = schedule.as_float32()
        K = self.K(schedule)
        bits = np.zeros(self.L)
        sq = np.zeros(self.L)
        for c in range(self.C):
            st = self.channel(c, schedule, K)
            bits += st.bits
            sq += st.sq_error(schedule.delta_inv[:, c] / schedule.delta[:, c])
        lam = self.cfg.lambdas_for(self.L)
        return LossReport(bits / self.n, np.maximum(sq, 0.0) / self.n, lam)


class _Corpus:
    """Component-weighted sum of several problems."""

    def __init__(self, problems):
        self.problems = problems
        self.n = sum(p.n for p in problems)

    @property
    def evaluations(self):
        return sum(p.evaluations for p in self.problems)

    def report(self, schedule):
        reps = [p.report(schedule) for p in self.problems]
        w = np.array([p.n for p in self.problems], dtype=np.float64) / self.n
        rate = sum(wi * r.rate for wi, r in zip(w, reps))
        dist = sum(wi * r.distortion for wi, r in zip(w, reps))
        return LossReport(rate, dist, reps[0].lambdas)

    def loss(self, schedule):
        return self.report(schedule).total


def _as_problem(latent, params, schedule, cfg):
    validate_schedule(schedule, n_channels=np.shape(latent)[0])
    return _Problem(latent, params, cfg, schedule.n_layers)


# -- public loss terms ----------------------------------------------------------


def total_loss(latent, params, schedule, cfg=LossConfig()):
    """Per-layer rates, distortions and the summed loss of ``schedule``."""
    return _as_problem(latent, params, schedule, cfg).report(schedule)


def rate_term(latent, params, schedule, l, cfg=LossConfig()):
    """Bits per component needed to reach layer ``l`` (1-based)."""
    return float(total_loss(latent, params, schedule, cfg).rate[l - 1])


def distortion_term(latent, params, schedule, l, cfg=LossConfig()):
    """Mean squared error of the layer-``l`` reconstruction (1-based)."""
    return float(total_loss(latent, params, schedule, cfg).distortion[l - 1])


# -- optimizer ------------------------------------------------------------------


def _line_search(f, x0, f0, lo, hi, grid=9, iters=12):
    """Grid scan of ``[lo, hi]`` refined by golden-section search around the
    best grid point; returns the best ``(x, f(x))`` seen, ``(x0, f0)`` included."""
    best_x, best_f = x0, f0
    if not hi > lo:
        return best_x, best_f
    xs = np.linspace(lo, hi, grid)
    fs = []
    for x in xs:
        fx = f(x)
        fs.append(fx)
        if fx < best_f:
            best_x, best_f = x, fx
    i = int(np.argmin(fs))
    a = xs[max(i - 1, 0)]
    b = xs[min(i + 1, grid - 1)]
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        for x, fx in ((c, fc), (d, fd)):
            if fx < best_f:
                best_x, best_f = x, fx
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    for x, fx in ((c, fc), (d, fd)):
        if fx < best_f:
            best_x, best_f = x, fx
    return best_x, best_f


class _Params:
    """Unconstrained view of a schedule.

    Per channel: ``log delta_1``, decrements ``dec[l] >= 0`` with
    ``delta_l = delta_1 * exp(-sum(dec[1..l]))``, and the ratio
    ``delta_inv / delta``.  Per layer: the selection threshold
    ``t = 0.5 ** (1 / gamma)`` (``t = 0`` selects everything).
    """

    def __init__(self, schedule):
        d = schedule.delta
        self.log_d1 = np.log(d[0]).copy()
        self.dec = np.vstack([np.zeros((1, d.shape[1])), np.log(d[:-1] / d[1:])])
        self.dec = np.maximum(self.dec, 0.0)
        self.ratio = np.clip(
            schedule.delta_inv / d, 1 - DELTA_INV_BOUND, 1 + DELTA_INV_BOUND
        )
        g = schedule.gamma
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            self.t = np.where(g <= FULL_SELECTION_GAMMA, 0.0, np.power(0.5, 1 / g))

    def copy(self):
        other = object.__new__(_Params)
        other.log_d1 = self.log_d1.copy()
        other.dec = self.dec.copy()
        other.ratio = self.ratio.copy()
        other.t = self.t.copy()
        return other

    def schedule(self):
        delta = np.exp(self.log_d1[None, :] - np.cumsum(self.dec, axis=0))
        with np.errstate(divide="ignore"):
            gamma = np.where(
                self.t <= 0, FULL_SELECTION_GAMMA, np.log(0.5) / np.log(np.maximum(self.t, _TINY))
            )
        gamma = np.maximum(gamma, FULL_SELECTION_GAMMA)
        s = StepSchedule(delta, delta * self.ratio, gamma).as_float32()
        # float32 rounding may break monotonicity by one ulp
        d = np.minimum.accumulate(s.delta, axis=0)
        return s.replace(delta=d, delta_inv=d * (s.delta_inv / s.delta)).as_float32()


@dataclass
class FitResult:
    schedule: StepSchedule
    report: LossReport
    start_report: LossReport
    trit_report: LossReport
    history: list = field(default_factory=list)
    evaluations: int = 0
    converged: bool = False
    diagnostic: str = ""


def _build_corpus(data, n_layers, cfg):
    if isinstance(data, SourceConfig):
        data = [sample_source(data)]
    elif isinstance(data, tuple) and len(data) == 2 and isinstance(data[1], GaussianParams):
        data = [data]
    problems = [_Problem(y, p, cfg, n_layers) for y, p in data]
    if not problems:
        raise ValueError("empty corpus")
    C = {p.C for p in problems}
    if len(C) != 1:
        raise ValueError("corpus latents must share the channel count")
    return _Corpus(problems)


def best_trit_schedule(corpus, n_layers, grid=25):
    """Trit ladder whose common finest step minimizes the loss."""
    C = corpus.problems[0].C
    sig = np.concatenate([p.params.sigma.ravel() for p in corpus.problems])
    mid = float(np.median(sig))

    def f(x):
        return corpus.loss(trit_schedule(n_layers, C, finest=math.exp(x)))

    lo = math.log(mid) - (n_layers - 1) * math.log(3) - 4
    hi = math.log(mid) + 2
    x0 = 0.5 * (lo + hi)
    x, _ = _line_search(f, x0, f(x0), lo, hi, grid=grid)
    return trit_schedule(n_layers, C, finest=math.exp(x)).as_float32()


def fit_schedule(
    data,
    n_layers=8,
    cfg=LossConfig(),
    init=None,
    max_sweeps=4,
    tol=1e-5,
    time_budget=None,
    fit_delta_inv=True,
    fit_gamma=True,
    span=1.5,
):
    """Coordinate descent on the schedule; see :func:`optimize_schedule`."""
    if n_layers < 1:
        raise ValueError("n_layers must be at least 1")
    corpus = _build_corpus(data, n_layers, cfg)
    C = corpus.problems[0].C
    started = time.monotonic()

    trit = best_trit_schedule(corpus, n_layers)
    trit_report = corpus.report(trit)
    start, start_report = trit, trit_report
    if init is not None:
        validate_schedule(init, n_channels=C)
        if init.n_layers != n_layers:
            raise ValueError("init schedule has the wrong number of layers")
        init_report = corpus.report(init)
        if init_report.total < start_report.total:
            start, start_report = init.as_float32(), init_report
    if not fit_gamma:
        start = start.replace(gamma=(init if init is not None else start).gamma)
        start_report = corpus.report(start)

    theta = _Params(start)
    best = start_report.total
    history = [best]
    diagnostic = ""
    converged = False

    def loss_of(th):
        return corpus.loss(th.schedule())

    def out_of_time():
        return time_budget is not None and time.monotonic() - started > time_budget

    def coord(getter, setter, lo, hi):
        nonlocal best

        def f(x):
            trial = theta.copy()
            setter(trial, x)
            return loss_of(trial)

        x0 = getter(theta)
        x, fx = _line_search(f, x0, best, lo, hi)
        if fx < best:
            setter(theta, x)
            best = fx
            history.append(best)

    for sweep in range(max_sweeps):
        before = best
        for c in range(C):
            coord(
                lambda th: th.log_d1[c],
                lambda th, x: th.log_d1.__setitem__(c, x),
                theta.log_d1[c] - span,
                theta.log_d1[c] + span,
            )
            for l in range(1, n_layers):
                coord(
                    lambda th: th.dec[l, c],
                    lambda th, x: th.dec.__setitem__((l, c), x),
                    max(0.0, theta.dec[l, c] - span),
                    theta.dec[l, c] + span,
                )
            if fit_delta_inv:
                _fit_ratio(corpus, theta, c)
                new = loss_of(theta)
                if new < best:
                    best = new
                    history.append(best)
            if out_of_time():
                break
        if fit_gamma and not out_of_time():
            for l in range(n_layers):
                coord(
                    lambda th: th.t[l],
                    lambda th, x: th.t.__setitem__(l, x),
                    0.0,
                    0.95,
                )
        log.info("sweep %d: loss %.6g", sweep + 1, best)
        if out_of_time():
            diagnostic = f"time budget of {time_budget}s exhausted after sweep {sweep + 1}"
            break
        if before - best <= tol * abs(before):
            converged = True
            break
    else:
        diagnostic = f"stopped after {max_sweeps} sweeps without meeting tolerance"

    schedule = theta.schedule()
    validate_schedule(schedule, n_channels=C)
    report = corpus.report(schedule)
    if report.total > start_report.total:
        # cannot happen with descent-only updates; kept as a hard guard
        schedule, report = start, start_report
    return FitResult(
        schedule=schedule,
        report=report,
        start_report=start_report,
        trit_report=trit_report,
        history=history,
        evaluations=corpus.evaluations,
        converged=converged,
        diagnostic=diagnostic,
    )


def _fit_ratio(corpus, theta, c):
    """Closed-form minimization of each layer's ``delta_inv / delta`` for
    channel ``c``; quantization is unaffected by the ratio."""
    s = theta.schedule()
    syr = 0.0
    srr = 0.0
    for p in corpus.problems:
        st = p.channel(c, s, p.K(s))
        syr = syr + st.syr
        srr = srr + st.srr
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(srr > 0, syr / srr, 1.0)
    old = theta.ratio[:, c].copy()
    theta.ratio[:, c] = np.clip(a, 1 - DELTA_INV_BOUND, 1 + DELTA_INV_BOUND)
    if corpus.loss(theta.schedule()) > corpus.loss(s):
        theta.ratio[:, c] = old


def optimize_schedule(data, n_layers=8, cfg=LossConfig(), **kwargs):
    """Fit a step schedule minimizing ``sum_l R_l + lambda_l D_l``.

    ``data`` is a :class:`SourceConfig`, a ``(latent, params)`` pair, or a list
    of pairs.  The search starts from the better of the best trit ladder and
    ``init`` and only accepts loss decreases, so the result is never worse
    than either.  Returns the schedule; use :func:`fit_schedule` for the
    diagnostics.
    """
    return fit_schedule(data, n_layers, cfg, **kwargs).schedule
