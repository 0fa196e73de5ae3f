"""Observed-versus-simulated comparisons: aggregated sums, QQ tables, chi overlays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import GridGeometry
from .diagnostics import ChiCurve, chi_hat

QQ_PROBS = np.round(np.concatenate([np.arange(0.05, 0.951, 0.05), [0.99]]), 2)


@dataclass(frozen=True)
class AggregationSpec:
    s0: int
    radii: tuple
    region: np.ndarray | None = None

    def __post_init__(self):
        r = np.asarray(self.radii, float)
        if r.ndim != 1 or len(r) == 0 or np.any(np.diff(r) < 0) or np.any(r < 0):
            raise ValueError("radii must be a nonempty ascending list of nonnegative values")


def ball_masks(geometry: GridGeometry, spec: AggregationSpec) -> np.ndarray:
    """(n_radii, n_sites) membership of B_d(s0) intersected with the region."""
    d = geometry.distances_from(spec.s0)
    region = np.ones(geometry.n_sites, bool) if spec.region is None else np.asarray(spec.region, bool)
    return (d[None, :] <= np.asarray(spec.radii, float)[:, None]) & region[None, :]


def aggregated_sums(fields, geometry: GridGeometry, spec: AggregationSpec) -> np.ndarray:
    """Area-weighted sums (mm/h km^2) per field and radius; missing cells contribute nothing."""
    f = np.atleast_2d(np.asarray(fields, float))
    masks = ball_masks(geometry, spec)
    if not masks[0].any():
        raise ValueError("the smallest ball does not intersect the region")
    return geometry.cell_area * (np.nan_to_num(f, nan=0.0) @ masks.T.astype(float))


@dataclass
class QQPairs:
    probs: np.ndarray
    first: np.ndarray
    second: np.ndarray

    def rows(self):
        return list(zip(self.probs.tolist(), self.first.tolist(), self.second.tolist()))

    def to_csv(self, path, names=("observed", "simulated")) -> None:
        with open(path, "w") as fh:
            fh.write(f"p,{names[0]},{names[1]}\n")
            for p, a, b in self.rows():
                fh.write(f"{p!r},{a!r},{b!r}\n")


def qq_table(first, second, probs=QQ_PROBS) -> QQPairs:
    a = np.asarray(first, float).ravel()
    b = np.asarray(second, float).ravel()
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    probs = np.asarray(probs, float)
    return QQPairs(probs, np.quantile(a, probs), np.quantile(b, probs))


@dataclass
class ChiOverlay:
    p: float
    observed: ChiCurve
    simulated: ChiCurve

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("p,d,chi_observed,n_observed,chi_simulated,n_simulated\n")
            for (d, co, no, _), (_, cs, ns, _) in zip(self.observed.rows(), self.simulated.rows()):
                fo = "NA" if np.isnan(co) else repr(co)
                fs = "NA" if np.isnan(cs) else repr(cs)
                fh.write(f"{self.p!r},{d!r},{fo},{no},{fs},{ns}\n")


def chi_overlay(observed_laplace, simulated_laplace, geometry: GridGeometry, s0: int, p_levels=(0.9,),
                d_grid=None, estimator=chi_hat) -> list[ChiOverlay]:
    """chi_p(d) at s0 from both sources through the same estimator."""
    out = []
    for p in p_levels:
        out.append(ChiOverlay(
            float(p),
            estimator(observed_laplace, geometry, p, d_grid=d_grid, s0=s0),
            estimator(simulated_laplace, geometry, p, d_grid=d_grid, s0=s0),
        ))
    return out
