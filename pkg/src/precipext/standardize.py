"""Transforms between positive intensities and standard-Laplace margins."""

from __future__ import annotations

import logging

import numpy as np

from .datastore import PrecipCube
from .margins import MarginalModel, marginal_cdf, marginal_quantile

log = logging.getLogger(__name__)

CLAMP = 1e-12


def laplace_cdf(x):
    x = np.asarray(x, float)
    with np.errstate(over="ignore"):
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0)), 1 - 0.5 * np.exp(-np.maximum(x, 0)))


def laplace_quantile(p):
    p = np.asarray(p, float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    return np.where(p < 0.5, np.log(2 * np.minimum(p, 0.5)), -np.log(2 * (1 - np.maximum(p, 0.5))))


def laplace_survival(x):
    x = np.asarray(x, float)
    return np.where(x < 0, 1 - 0.5 * np.exp(np.minimum(x, 0)), 0.5 * np.exp(-np.maximum(x, 0)))


def threshold_on_laplace(p_tau: float) -> float:
    """Constant Laplace-scale threshold for exceedance probability 1 - p_tau."""
    if not 0.5 < p_tau < 1:
        raise ValueError(f"p_tau must lie in (0.5, 1) so that the threshold is positive, got {p_tau}")
    return float(laplace_quantile(p_tau))


def values_to_laplace(x, days, model: MarginalModel) -> tuple[np.ndarray, int]:
    """Transform positive intensities; returns the values and how many CDFs were clamped."""
    u = marginal_cdf(x, days, model)
    clamped = int(np.count_nonzero((u < CLAMP) | (u > 1 - CLAMP)))
    return laplace_quantile(np.clip(u, CLAMP, 1 - CLAMP)), clamped


def to_laplace(cube: PrecipCube, model: MarginalModel) -> tuple[PrecipCube, int]:
    """Laplace-scale cube: positive values transformed, dry cells -inf, missing NaN.

    Returns the new cube and the number of clamped CDF values.
    """
    if cube.kind not in ("precip", "intensity"):
        raise ValueError(f"cannot standardize a cube of kind {cube.kind!r}")
    if not model.covers(np.unique(cube.days)):
        missing = np.setdiff1d(np.unique(cube.days), model.days)
        raise KeyError(f"marginal model does not cover days {missing[:5].tolist()}")
    v = cube.values
    out = np.full(v.shape, np.nan)
    out[v == 0] = -np.inf
    pos = v > 0
    days = np.broadcast_to(cube.days[:, None], v.shape)
    out[pos], clamped = values_to_laplace(v[pos], days[pos], model)
    if clamped:
        log.warning("clamped %d marginal CDF values to [%g, 1 - %g]", clamped, CLAMP, CLAMP)
    return cube.with_values(out, kind="laplace"), clamped


def values_from_laplace(y, days, model: MarginalModel) -> np.ndarray:
    return marginal_quantile(laplace_cdf(y), days, model)


def from_laplace(cube: PrecipCube, model: MarginalModel, kind: str = "precip") -> PrecipCube:
    """Inverse of :func:`to_laplace`; -inf becomes 0 (use ``kind='intensity'`` to keep NaN for dry cells)."""
    if cube.kind != "laplace":
        raise ValueError("expected a Laplace-scale cube")
    y = cube.values
    out = np.full(y.shape, np.nan)
    dry = np.isneginf(y)
    out[dry] = 0.0 if kind == "precip" else np.nan
    fin = np.isfinite(y)
    days = np.broadcast_to(cube.days[:, None], y.shape)
    out[fin] = values_from_laplace(y[fin], days[fin], model)
    return cube.with_values(out, kind=kind)
