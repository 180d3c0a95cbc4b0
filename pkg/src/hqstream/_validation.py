"""Input validation shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .errors import ShapeError
from .latent import GaussianParams


def check_latent(X):
    """A finite float64 ``(C, H, W)`` array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, copy=False)
    if X.ndim != 3:
        raise ShapeError(f"latent must be (C, H, W), got shape {X.shape}")
    return X


def check_params(params, shape):
    """Coerce ``params`` (GaussianParams or a ``(mu, sigma)`` pair) and check
    it matches ``shape``."""
    if params is None:
        raise ValueError("Gaussian parameters (mu, sigma) are required")
    if not isinstance(params, GaussianParams):
        mu, sigma = params
        params = GaussianParams(mu, sigma)
    if params.shape != tuple(shape):
        raise ShapeError(f"parameter shape {params.shape} != latent shape {tuple(shape)}")
    return params


def check_point(point, n_layers):
    if point is None:
        return None
    point = float(point)
    if not np.isfinite(point) or point < 0:
        raise ValueError(f"progress point must be a non-negative number, got {point}")
    return point


def check_budget(budget):
    if budget is None:
        return None
    if int(budget) != budget or budget < 0:
        raise ValueError(f"byte budget must be a non-negative integer, got {budget}")
    return int(budget)
