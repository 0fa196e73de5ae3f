"""Sliding-window empirical estimators of conditional moments and chi_p(d).

Pairs are ordered: a site pair (i, j) contributes once with i conditioning and
once with j conditioning, and the self pair (i, i) falls in the d = 0 window.
On the Laplace scale -inf marks a dry cell and NaN a masked or missing one.
Moment estimators treat dry cells as unobserved; chi counts them as
non-exceedances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastore import GridGeometry, PrecipCube
from .standardize import laplace_quantile


@dataclass(frozen=True)
class WindowSpec:
    d_half: float = 0.5
    logy_half: float = 0.025
    min_count: int = 30

    def __post_init__(self):
        if not (self.d_half > 0 and self.logy_half > 0):
            raise ValueError("window half-widths must be positive")


def default_y0_levels(n: int = 20, lo: float = 0.85, hi: float = 0.999, extra=(np.log(5.0),)) -> np.ndarray:
    """Log-spaced Laplace levels between two quantiles, merged with ``extra`` levels."""
    levels = np.exp(np.linspace(np.log(laplace_quantile(lo)), np.log(laplace_quantile(hi)), n))
    return np.unique(np.concatenate([levels, np.asarray(extra, float)]))


def default_d_grid(geometry: GridGeometry, step: float = 1.0) -> np.ndarray:
    c = geometry.coords
    diam = float(np.hypot(*(c.max(axis=0) - c.min(axis=0))))
    return np.arange(0.0, diam + 1e-9, step)


def _as_array(data) -> np.ndarray:
    return np.array(data.values if isinstance(data, PrecipCube) else data, float)


def _membership(geometry: GridGeometry, d_grid, d_half: float, rows=None) -> np.ndarray:
    """(n_rows, n_sites, n_bins) indicator |d_ij - d_k| <= d_half."""
    D = geometry.distance_matrix()
    if rows is not None:
        D = D[rows]
    return np.abs(D[..., None] - np.asarray(d_grid)[None, None, :]) <= d_half + 1e-12


@dataclass
class EstimatorSurface:
    """Per-(y0 level, distance) empirical mean and sd of paired values, with counts.

    Cells below the minimum count are NaN.
    """

    y0_levels: np.ndarray
    d_grid: np.ndarray
    mu: np.ndarray
    zeta: np.ndarray
    count: np.ndarray

    def alpha(self) -> np.ndarray:
        return alpha_hat(self.mu, self.y0_levels)

    def beta(self, y1: float) -> np.ndarray:
        return beta_hat(self.zeta, self.y0_levels, y1)

    def sigma(self, y1: float) -> np.ndarray:
        return sigma_hat(self.zeta, self.beta(y1), self.y0_levels)

    def to_csv(self, path, y1: float | None = None) -> None:
        cols = {"mu": self.mu, "zeta": self.zeta, "alpha": self.alpha()}
        if y1 is not None:
            cols["beta"] = self.beta(y1)
            cols["sigma"] = self.sigma(y1)
        with open(path, "w") as fh:
            fh.write("y0,d," + ",".join(cols) + ",count\n")
            for i, y in enumerate(self.y0_levels):
                for k, d in enumerate(self.d_grid):
                    vals = ",".join("NA" if np.isnan(c[i, k]) else repr(float(c[i, k])) for c in cols.values())
                    fh.write(f"{float(y)!r},{float(d)!r},{vals},{int(self.count[i, k])}\n")


def sliding_moments(
    data, geometry: GridGeometry, spec: WindowSpec = WindowSpec(), y0_levels=None, d_grid=None,
    s0: int | None = None,
) -> EstimatorSurface:
    """Mean and sd of Y(s) over pairs with |log Y(s') - log y0| <= logy_half and |d(s, s') - d| <= d_half.

    ``s0=None`` uses every site as a conditioning site; otherwise only ``s0``.
    """
    Y = _as_array(data)
    y0_levels = default_y0_levels() if y0_levels is None else np.asarray(y0_levels, float)
    d_grid = default_d_grid(geometry) if d_grid is None else np.asarray(d_grid, float)
    if np.any(y0_levels <= 0):
        raise ValueError("y0 levels must be positive")
    obs = np.isfinite(Y)
    V = np.where(obs, Y, 0.0)
    O = obs.astype(float)
    cond_sites = np.arange(geometry.n_sites) if s0 is None else np.array([s0])
    mem = _membership(geometry, d_grid, spec.d_half, cond_sites).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logY = np.log(np.where(obs, Y, np.nan))[:, cond_sites]
    L, K = len(y0_levels), len(d_grid)
    n = np.zeros((L, K))
    s1 = np.zeros((L, K))
    s2 = np.zeros((L, K))
    for l, y in enumerate(y0_levels):
        with np.errstate(invalid="ignore"):
            S = (np.abs(logY - np.log(y)) <= spec.logy_half + 1e-12).astype(float)
        rows = np.flatnonzero(S.any(axis=1))
        if len(rows) == 0:
            continue
        Sr = S[rows]
        for acc, M in ((n, O), (s1, V), (s2, V * V)):
            pair = Sr.T @ M[rows]  # (n_cond, n_sites)
            acc[l] = np.einsum("ij,ijk->k", pair, mem)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = s1 / n
        # plug-in variance, so duplicating the data leaves the surface unchanged
        var = s2 / n - mu * mu
    zeta = np.sqrt(np.maximum(var, 0.0))
    few = n < spec.min_count
    mu[few] = np.nan
    zeta[few] = np.nan
    return EstimatorSurface(y0_levels, d_grid, mu, zeta, n.astype(int))


def alpha_hat(mu, y0_levels) -> np.ndarray:
    y0 = np.asarray(y0_levels, float)
    if np.any(y0 <= 0):
        raise ValueError("y0 must be positive")
    return np.asarray(mu, float) / y0[:, None]


def _level_index(y0_levels, y1: float) -> int:
    hit = np.flatnonzero(np.isclose(y0_levels, y1, rtol=0, atol=1e-12))
    if len(hit) == 0:
        raise ValueError(f"y1={y1} is not one of the y0 levels")
    return int(hit[0])


def beta_hat(zeta, y0_levels, y1: float) -> np.ndarray:
    """log(zeta(y0) / zeta(y1)) / log(y0 / y1); NaN where undefined (y0 == y1 or zeta <= 0)."""
    zeta = np.asarray(zeta, float)
    y0 = np.asarray(y0_levels, float)
    j = _level_index(y0, y1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(zeta / zeta[j][None, :]) / np.log(y0 / y0[j])[:, None]
    bad = (zeta <= 0) | (zeta[j][None, :] <= 0) | ~np.isfinite(out)
    out[bad] = np.nan
    out[j] = np.nan
    return out


def sigma_hat(zeta, beta, y0_levels) -> np.ndarray:
    y0 = np.asarray(y0_levels, float)[:, None]
    return np.asarray(zeta, float) * y0 ** (-np.asarray(beta, float))


@dataclass
class ChiCurve:
    p: float
    d_grid: np.ndarray
    chi: np.ndarray
    n_cond: np.ndarray
    n_joint: np.ndarray

    def binomial_se(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(self.chi * (1 - self.chi) / self.n_cond)

    def rows(self):
        return list(zip(self.d_grid.tolist(), self.chi.tolist(), self.n_cond.tolist(), self.n_joint.tolist()))


def chi_hat(
    data, geometry: GridGeometry, p: float, d_grid=None, d_half: float = 0.5, s0: int | None = None,
    site_mask=None,
) -> ChiCurve:
    """Share of joint exceedances of the Laplace p-quantile among conditioning exceedances, per distance bin."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    Y = _as_array(data)
    if site_mask is not None:
        Y[:, ~np.asarray(site_mask, bool)] = np.nan
    q = float(laplace_quantile(p))
    d_grid = default_d_grid(geometry) if d_grid is None else np.asarray(d_grid, float)
    obs = ~np.isnan(Y)
    with np.errstate(invalid="ignore"):
        exc = obs & (Y > q)
    cond_sites = np.arange(geometry.n_sites) if s0 is None else np.array([s0])
    E = exc[:, cond_sites].astype(float)
    rows = np.flatnonzero(E.any(axis=1))
    mem = _membership(geometry, d_grid, d_half, cond_sites).astype(float)
    pair_cond = E[rows].T @ obs[rows].astype(float)
    pair_joint = E[rows].T @ exc[rows].astype(float)
    n_cond = np.einsum("ij,ijk->k", pair_cond, mem)
    n_joint = np.einsum("ij,ijk->k", pair_joint, mem)
    with np.errstate(invalid="ignore", divide="ignore"):
        chi = np.where(n_cond > 0, n_joint / n_cond, np.nan)
    return ChiCurve(p, d_grid, chi, n_cond.astype(int), n_joint.astype(int))


@dataclass
class StabilizationReport:
    candidates: np.ndarray
    alpha_range: np.ndarray
    beta_range: np.ndarray
    n_levels_above: np.ndarray
    recommended: float | None
    tol_alpha: float
    tol_beta: float
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "recommended_tau": self.recommended,
            "tol_alpha": self.tol_alpha,
            "tol_beta": self.tol_beta,
            "candidates": [
                {"tau": float(t), "alpha_range": _nan_none(a), "beta_range": _nan_none(b), "n_levels_above": int(n)}
                for t, a, b, n in zip(self.candidates, self.alpha_range, self.beta_range, self.n_levels_above)
            ],
            "notes": list(self.notes),
        }


def _nan_none(x):
    return None if not np.isfinite(x) else float(x)


def _max_range(surface: np.ndarray) -> float:
    """Largest spread across levels, over distances with at least two finite levels."""
    s = np.asarray(surface, float)
    ok = np.isfinite(s).sum(axis=0) >= 2
    if not ok.any():
        return np.nan
    sub = s[:, ok]
    return float(np.max(np.nanmax(sub, axis=0) - np.nanmin(sub, axis=0)))


def threshold_selection(
    alpha_surface, beta_surface, y0_levels, tol_alpha: float = 0.1, tol_beta: float = 0.15, min_above: int = 2,
) -> StabilizationReport:
    """Smallest candidate tau for which alpha-hat and beta-hat vary less than the tolerances across y0 > tau."""
    y0 = np.asarray(y0_levels, float)
    A = np.asarray(alpha_surface, float)
    B = np.asarray(beta_surface, float)
    if len(y0) < 5:
        raise ValueError("threshold selection needs at least 5 y0 levels")
    order = np.argsort(y0)
    y0, A, B = y0[order], A[order], B[order]
    ra, rb, na = [], [], []
    for tau in y0:
        above = y0 > tau
        na.append(int(above.sum()))
        if above.sum() < min_above:
            ra.append(np.nan)
            rb.append(np.nan)
            continue
        ra.append(_max_range(A[above]))
        rb.append(_max_range(B[above]))
    ra, rb, na = np.array(ra), np.array(rb), np.array(na)
    passes = (na >= min_above) & (ra <= tol_alpha) & ((rb <= tol_beta) | np.isnan(rb)) & np.isfinite(ra)
    rec = float(y0[np.flatnonzero(passes)[0]]) if passes.any() else None
    notes = [] if rec is not None else ["no candidate stabilizes within the tolerances"]
    return StabilizationReport(y0, ra, rb, na, rec, tol_alpha, tol_beta, notes)
