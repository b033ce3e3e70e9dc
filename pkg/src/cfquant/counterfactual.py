"""Counterfactual prediction from a trained (h, g) pair.

If y is the tau-quantile of P(Y | x, z) and Y is strictly monotone in the
noise, then the counterfactual outcome under X = x' is the same tau-quantile
of P(Y | x', z). So ``y' = g(x', z, h(x, z, y))``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bilevel import BilevelModel
from .errors import DomainError

QUERY_COLUMNS = ("x_prime", "y_hat", "y_true", "tau_hat", "extrapolated")


@dataclass(frozen=True)
class CfResult:
    x_prime: np.ndarray
    y_hat: np.ndarray
    tau_hat: float
    extrapolated: np.ndarray
    y_true: np.ndarray = None


def infer_tau(model: BilevelModel, sample) -> float:
    """tau_hat = h(x, z, y) for one factual sample."""
    return float(model.h([sample.x], np.reshape(sample.z, (1, -1)), [sample.y])[0])


def extrapolated(model: BilevelModel, x_prime):
    lo, hi = model.x_range
    xp = np.asarray(x_prime, dtype=np.float64)
    return (xp < lo) | (xp > hi)


def predict_from_tau(model: BilevelModel, z, tau, x_prime):
    """g(x', z, tau) over an array of x'; a function of (z, tau, x') only."""
    xp = np.atleast_1d(np.asarray(x_prime, dtype=np.float64))
    zz = np.broadcast_to(np.reshape(np.asarray(z, dtype=np.float64), (1, -1)), (xp.size, np.size(z)))
    return model.g.predict(xp, zz, tau)


def predict_counterfactual(model: BilevelModel, sample, x_prime):
    """Point prediction for one x' (float) or many (array)."""
    y = predict_from_tau(model, sample.z, infer_tau(model, sample), x_prime)
    return float(y[0]) if np.ndim(x_prime) == 0 else y


def traverse(model: BilevelModel, sample, x_grid, y_true=None) -> CfResult:
    """Counterfactual curve over ``x_grid`` with extrapolation flags."""
    grid = np.asarray(x_grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise DomainError("empty x grid")
    tau = infer_tau(model, sample)
    return CfResult(
        x_prime=grid,
        y_hat=predict_from_tau(model, sample.z, tau, grid),
        tau_hat=tau,
        extrapolated=extrapolated(model, grid),
        y_true=None if y_true is None else np.asarray(y_true, dtype=np.float64),
    )


def write_query_csv(results, path):
    """One row per x'; ``y_true`` is left blank when unknown."""
    if isinstance(results, CfResult):
        results = [results]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUERY_COLUMNS)
        for r in results:
            for i in range(r.x_prime.size):
                yt = "" if r.y_true is None else format(float(r.y_true[i]), ".17g")
                w.writerow([
                    format(float(r.x_prime[i]), ".17g"),
                    format(float(r.y_hat[i]), ".17g"),
                    yt,
                    format(r.tau_hat, ".17g"),
                    int(bool(r.extrapolated[i])),
                ])
