"""Windowed Monte-Carlo estimate of the factual quantile level."""
from __future__ import annotations

import numpy as np

from . import _kernels as K
from .errors import DomainError, EstimatorUndefinedError

DEFAULT_WINDOW = 0.01


def mc_quantile(dataset, sample, window=DEFAULT_WINDOW):
    """Fraction of neighbours with y_i <= y.

    Neighbours are rows with |x_i - x| <= window and |z_ik - z_k| <= window for
    every component k. ``window=0`` is exact matching, which is what discrete
    treatments need. Returns ``(tau_hat, n_matched)``.
    """
    if not window >= 0:
        raise DomainError("window must be >= 0")
    n, k = K.window_stats(dataset.x, dataset.z, dataset.y, sample.x, sample.z, sample.y, window)
    if n == 0:
        raise EstimatorUndefinedError(
            f"no training rows within {window} of (x={sample.x}, z={list(np.ravel(sample.z))})"
        )
    return k / n, n
