"""Synthetic-truth generator: every fitting stage gets a cube with known parameters.

Laplace-scale dependence comes from one of two sources:

* ``"copula"``: a Gaussian copula with a Matérn correlation, so each site has
  exact standard-Laplace margins.
* ``"condext"``: Y(s0) is standard Laplace; above tau the field is drawn from
  the conditional extremes model, below it from the copula conditioned on
  Y(s0).

Intensities follow from the split marginal quantile, then the occurrence
model decides which cells are dry.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from scipy import special

from .condext import CondExtremesModel, simulate_conditional_field
from .datastore import GridGeometry, PrecipCube
from .margins import MarginalModel, marginal_quantile
from .occurrence import MuSpline, Nonzero, Probit, SpatialProbit, ThresholdModel, simulate_occurrence
from .randfield import MaternParams, build_sampler, matern_correlation
from .standardize import CLAMP, laplace_cdf, laplace_quantile


@dataclass(frozen=True)
class SyntheticTruth:
    marginal: MarginalModel
    dependence: str = "copula"
    copula: MaternParams = MaternParams(0.5, 10.0)
    condext: CondExtremesModel | None = None
    occurrence: object = Nonzero()
    hours_per_day: int = 24
    s0: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.dependence not in ("copula", "condext"):
            raise ValueError("dependence must be 'copula' or 'condext'")
        if self.dependence == "condext" and self.condext is None:
            raise ValueError("condext dependence needs a CondExtremesModel")
        if self.copula.sigma != 1.0:
            raise ValueError("the copula field must have unit variance")
        if self.hours_per_day < 1:
            raise ValueError("hours_per_day must be >= 1")
        if not isinstance(self.occurrence, (Nonzero, Probit, SpatialProbit, ThresholdModel)):
            raise TypeError("unknown occurrence model")

    @property
    def conditioning_site(self) -> int | None:
        return self.condext.s0 if self.condext is not None else self.s0


def flat_probit(rate: float) -> Probit:
    """Probit with constant wet probability ``rate`` at every distance."""
    return Probit(MuSpline(5.0, (0.0,), anchor=float(special.ndtri(rate))))


def month_of_day(day_of_year) -> np.ndarray:
    base = dt.date(2001, 1, 1).toordinal() - 1
    return np.array([dt.date.fromordinal(base + int(d)).month for d in np.atleast_1d(day_of_year)])


def constant_marginal(days, psi: float = 2.0, kappa: float = 0.69, phi: float = 1.0, xi: float = 0.145,
                      p_u: float = 0.95) -> MarginalModel:
    days = np.asarray(days)
    return MarginalModel(days, np.full(len(days), np.log(psi)), kappa, np.full(len(days), np.log(phi)), xi, p_u)


def _copula_laplace(sampler, n: int, rng) -> np.ndarray:
    g = sampler.sample(rng, n)
    return laplace_quantile(np.clip(special.ndtr(g), CLAMP, 1 - CLAMP))


def synthetic_laplace(truth: SyntheticTruth, geometry: GridGeometry, n_times: int, rng) -> np.ndarray:
    if truth.dependence == "copula":
        return _copula_laplace(build_sampler(geometry, truth.copula), n_times, rng)
    model = truth.condext
    s0 = model.s0
    y0 = laplace_quantile(np.clip(rng.uniform(size=n_times), CLAMP, 1 - CLAMP))
    out = np.empty((n_times, geometry.n_sites))
    event = y0 > model.tau
    # below tau: copula field conditioned on its value at s0
    quiet = np.flatnonzero(~event)
    if len(quiet):
        cond = build_sampler(geometry, truth.copula, constraint=s0)
        r0 = matern_correlation(geometry.distances_from(s0), truth.copula)
        g0 = special.ndtri(laplace_cdf(y0[quiet]))
        g = g0[:, None] * r0[None, :] + cond.sample(rng, len(quiet))
        out[quiet] = laplace_quantile(np.clip(special.ndtr(g), CLAMP, 1 - CLAMP))
        out[quiet, s0] = y0[quiet]
    ext = np.flatnonzero(event)
    if len(ext):
        sampler = build_sampler(geometry, model.residual, constraint=s0)
        for t in ext:
            out[t] = simulate_conditional_field(model, y0[t], geometry, rng, sampler)
    return out


def generate_synthetic(
    truth: SyntheticTruth, geometry: GridGeometry, n_times: int, seed: int | None = None,
    return_laplace: bool = False,
):
    """Draw a precipitation cube (mm/h) from the full generative pipeline; deterministic given the seed."""
    rng = np.random.default_rng(truth.seed if seed is None else seed)
    model_days = truth.marginal.days
    hours = np.arange(n_times)
    days = model_days[(hours // truth.hours_per_day) % len(model_days)]
    Y = synthetic_laplace(truth, geometry, n_times, rng)
    u = np.clip(laplace_cdf(Y), CLAMP, 1 - CLAMP)
    x = marginal_quantile(u, days[:, None], truth.marginal)
    s0 = truth.conditioning_site if truth.conditioning_site is not None else geometry.n_sites // 2
    occ = occurrence_fields(truth.occurrence, geometry, s0, rng, Y)
    cube = PrecipCube(geometry, hours, days, month_of_day(days), np.where(occ > 0, x, 0.0))
    return (cube, Y) if return_laplace else cube


def occurrence_fields(model, geometry: GridGeometry, s0: int, rng, laplace: np.ndarray) -> np.ndarray:
    n = laplace.shape[0]
    if isinstance(model, ThresholdModel):
        # the quantile is pooled within each field
        return np.stack([simulate_occurrence(model, geometry, s0, rng, companion=row) for row in laplace])
    return np.atleast_2d(simulate_occurrence(model, geometry, s0, rng, size=n))
