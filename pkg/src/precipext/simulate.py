"""End-to-end simulation of conditional extreme precipitation fields.

For each field i: pick a time from the pool, draw y0 = tau + Exp(1), draw the
Laplace field given y0, draw occurrence, map intensities back through the
day-specific marginal quantile and multiply by occurrence.  Every field has
its own counter-based RNG stream spawned from the master seed, so a field's
draw does not depend on how many fields precede it or which worker runs it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .condext import CondExtFit, CondExtremesModel, simulate_conditional_field
from .datastore import GridGeometry, PrecipCube, write_cube
from .margins import MarginalModel, marginal_quantile
from .occurrence import SpatialProbit, ThresholdModel, apply_threshold_model, simulate_occurrence
from .randfield import build_sampler
from .standardize import CLAMP, laplace_cdf
from .synthetic import month_of_day


def sample_exceedance(tau: float, rng: np.random.Generator, size=None):
    """tau + Exp(1); exact for the standard Laplace upper tail when tau >= 0."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0 for the exponential tail identity, got {tau}")
    return tau + rng.standard_exponential(size)


def field_streams(master_seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


@dataclass(eq=False)
class SimulationBatch:
    geometry: GridGeometry
    s0: int
    tau: float
    values: np.ndarray  # mm/h, (N, n_sites)
    laplace: np.ndarray  # intensity on the Laplace scale, -inf where dry
    occurrence: np.ndarray
    pool_index: np.ndarray
    hours: np.ndarray
    days: np.ndarray
    y0: np.ndarray
    thetas: np.ndarray
    region: np.ndarray
    master_seed: int
    fingerprints: dict = field(default_factory=dict)

    @property
    def n_fields(self) -> int:
        return len(self.y0)

    def to_cube(self) -> PrecipCube:
        n = self.n_fields
        return PrecipCube(self.geometry, np.arange(n), self.days, month_of_day(self.days), self.values)

    def laplace_cube(self) -> PrecipCube:
        n = self.n_fields
        return PrecipCube(self.geometry, np.arange(n), self.days, month_of_day(self.days), self.laplace,
                          kind="laplace")

    def provenance(self) -> dict:
        return {
            "master_seed": int(self.master_seed),
            "s0": int(self.s0),
            "tau": float(self.tau),
            "n_fields": self.n_fields,
            "region_sites": np.flatnonzero(self.region).tolist(),
            "fingerprints": dict(sorted(self.fingerprints.items())),
            "fields": [
                {"stream": i, "pool_index": int(p), "hour": int(h), "day": int(d), "y0": float(y)}
                for i, (p, h, d, y) in enumerate(zip(self.pool_index, self.hours, self.days, self.y0))
            ],
        }

    def write(self, cube_path, provenance_path) -> None:
        write_cube(self.to_cube(), cube_path)
        Path(provenance_path).write_text(json.dumps(self.provenance(), indent=1, sort_keys=True) + "\n")


def run_simulation(
    marginal: MarginalModel,
    condext: CondExtFit | CondExtremesModel,
    occurrence,
    geometry: GridGeometry,
    n: int = 1000,
    region=None,
    time_pool_hours=None,
    time_pool_days=None,
    master_seed: int = 0,
    fix_theta: bool = False,
    fingerprints: dict | None = None,
) -> SimulationBatch:
    """Simulate ``n`` conditional extreme fields at the model's conditioning site."""
    if isinstance(condext, CondExtFit):
        mode = condext.model
        fit = condext
    else:
        mode, fit = condext, None
    s0, tau = mode.s0, mode.tau
    if not 0 <= s0 < geometry.n_sites:
        raise ValueError("conditioning site outside the geometry")
    region = np.ones(geometry.n_sites, bool) if region is None else np.asarray(region, bool)
    if region.shape != (geometry.n_sites,):
        raise ValueError("region mask does not match the geometry")
    if not region.any():
        raise ValueError("simulation region is empty")
    if time_pool_days is None:
        time_pool_days = marginal.days
    pool_days = np.asarray(time_pool_days)
    pool_hours = np.arange(len(pool_days)) if time_pool_hours is None else np.asarray(time_pool_hours)
    if len(pool_days) == 0 or not marginal.covers(np.unique(pool_days)):
        raise ValueError("time pool is empty or not covered by the marginal model")

    streams = field_streams(master_seed, n)
    fixed_sampler = build_sampler(geometry, mode.residual, constraint=s0)
    occ_sampler = build_sampler(geometry, occurrence.residual, constraint=s0) \
        if isinstance(occurrence, SpatialProbit) else None
    N = geometry.n_sites
    Y = np.empty((n, N))
    occ = np.ones((n, N))
    idx = np.empty(n, int)
    y0 = np.empty(n)
    thetas = np.empty((n, 11))
    for i, rng in enumerate(streams):
        idx[i] = rng.integers(len(pool_days))
        y0[i] = sample_exceedance(tau, rng)
        if fit is None or fix_theta:
            model, sampler = mode, fixed_sampler
        else:
            model = CondExtremesModel.from_theta(fit.sample_theta(rng), tau, s0)
            sampler = build_sampler(geometry, model.residual, constraint=s0)
        thetas[i] = model.theta
        Y[i] = simulate_conditional_field(model, y0[i], geometry, rng, sampler)
        if not isinstance(occurrence, ThresholdModel):
            occ[i] = simulate_occurrence(occurrence, geometry, s0, rng, sampler=occ_sampler)
    if isinstance(occurrence, ThresholdModel):
        occ = apply_threshold_model(Y, occurrence, s0, sites=region)
    days = pool_days[idx]
    u = np.clip(laplace_cdf(Y), CLAMP, 1 - CLAMP)
    xplus = marginal_quantile(u, days[:, None], marginal)
    values = np.where(occ > 0, xplus, 0.0)
    lap = np.where(occ > 0, Y, -np.inf)
    return SimulationBatch(
        geometry, s0, tau, values, lap, occ, idx, pool_hours[idx], days, y0, thetas, region, master_seed,
        dict(fingerprints or {}),
    )
