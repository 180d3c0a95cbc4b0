"""scikit-learn style front end."""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import stream
from ._validation import check_latent, check_params, check_point
from .latent import validate_schedule
from .optimize import LossConfig, fit_schedule, total_loss
from .quant import DEFAULT_THRESHOLD


class HierarchicalQuantizer(TransformerMixin, BaseEstimator):
    """Learns a step schedule for a latent and codes latents with it.

    ``fit`` optimizes the schedule (or adopts ``schedule`` when given),
    ``transform`` returns a progressive container and ``inverse_transform``
    decodes one, optionally at a fractional progress ``point``.  Gaussian side
    parameters travel with every call as ``params``.
    """

    def __init__(
        self,
        n_layers=8,
        lambda_base=0.2,
        mode="exact",
        threshold=DEFAULT_THRESHOLD,
        max_sweeps=4,
        seed=0,
        schedule=None,
        fit_delta_inv=True,
        fit_gamma=True,
    ):
        self.n_layers = n_layers
        self.lambda_base = lambda_base
        self.mode = mode
        self.threshold = threshold
        self.max_sweeps = max_sweeps
        self.seed = seed
        self.schedule = schedule
        self.fit_delta_inv = fit_delta_inv
        self.fit_gamma = fit_gamma

    def _loss_config(self):
        return LossConfig(
            lambda_base=self.lambda_base, mode=self.mode, seed=self.seed, T=self.threshold
        )

    def fit(self, X, y=None, params=None):
        X = check_latent(X)
        params = check_params(params, X.shape)
        if self.schedule is not None:
            validate_schedule(self.schedule, n_channels=X.shape[0])
            self.schedule_ = self.schedule.as_float32()
            self.fit_result_ = None
        else:
            res = fit_schedule(
                (X, params),
                self.n_layers,
                self._loss_config(),
                max_sweeps=self.max_sweeps,
                fit_delta_inv=self.fit_delta_inv,
                fit_gamma=self.fit_gamma,
            )
            self.schedule_ = res.schedule
            self.fit_result_ = res
        self.n_channels_ = X.shape[0]
        return self

    def transform(self, X, params=None):
        check_is_fitted(self, "schedule_")
        X = check_latent(X)
        params = check_params(params, X.shape)
        return stream.encode(X, params, self.schedule_, T=self.threshold)

    def fit_transform(self, X, y=None, params=None):
        return self.fit(X, params=params).transform(X, params=params)

    def inverse_transform(self, container, point=None):
        point = check_point(point, None)
        return stream.decode(container, point)[0]

    def score(self, X, y=None, params=None):
        """Negated rate-distortion loss of the fitted schedule on ``X``."""
        check_is_fitted(self, "schedule_")
        X = check_latent(X)
        params = check_params(params, X.shape)
        return -total_loss(X, params, self.schedule_, self._loss_config()).total
