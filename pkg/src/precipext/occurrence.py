"""Occurrence models for the wet/dry pattern given an extreme at s0.

Four variants share one interface:

* ``Nonzero``: every site is wet.
* ``Probit``: independent Bernoulli(Phi(mu(d))) at distance d from s0.
* ``SpatialProbit``: wet iff mu(d) + Z*(s) + eps(s) > 0, where Z* is a Matérn
  (nu = 0.5) field pinned to 0 at s0 and eps is unit-variance noise.
* ``ThresholdModel``: the share p of sites with the smallest intensities is dry.

mu(d) is anchored at ``anchor`` for d = 0 and has a piecewise-constant slope
with one coefficient per knot interval.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .datastore import GridGeometry, PrecipCube
from .randfield import (
    MaternParams,
    PcPriorMatern,
    build_sampler,
    constrained_covariance,
    constrained_covariance_dlogrho,
    matern_correlation,
)

log = logging.getLogger(__name__)

MU_ANCHOR = 5.0
COEF_PRIOR_SD = 10.0


class OccurrenceFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class MuSpline:
    """mu(d) = anchor + sum_k coef_k * clip(d - k h, 0, h)."""

    knot_spacing: float
    coefs: tuple
    anchor: float = MU_ANCHOR

    def __post_init__(self):
        if not self.knot_spacing > 0:
            raise ValueError("knot spacing must be positive")
        object.__setattr__(self, "coefs", tuple(float(c) for c in self.coefs))

    @staticmethod
    def basis(d, knot_spacing: float, n_coefs: int) -> np.ndarray:
        d = np.asarray(d, float)
        starts = knot_spacing * np.arange(n_coefs)
        return np.clip(d[..., None] - starts, 0.0, knot_spacing)

    @classmethod
    def for_distances(cls, dmax: float, knot_spacing: float = 5.0, anchor: float = MU_ANCHOR, coefs=None):
        k = max(1, int(np.ceil(dmax / knot_spacing)))
        return cls(knot_spacing, tuple(np.zeros(k)) if coefs is None else coefs, anchor)

    def __call__(self, d) -> np.ndarray:
        return self.anchor + self.basis(d, self.knot_spacing, len(self.coefs)) @ np.asarray(self.coefs)


@dataclass(frozen=True)
class Nonzero:
    kind = "nonzero"


@dataclass(frozen=True)
class Probit:
    mu: MuSpline
    kind = "probit"

    def prob(self, d):
        return special.ndtr(self.mu(d))


@dataclass(frozen=True)
class SpatialProbit:
    """Latent-field probit; the noise sd is fixed at 1, which sets the probit scale."""

    mu: MuSpline
    residual: MaternParams
    nugget_sd: float = 1.0
    hessian: np.ndarray | None = field(default=None, compare=False, repr=False)
    kind = "spatial-probit"

    def __post_init__(self):
        if self.residual.nu != 0.5:
            raise ValueError("latent field smoothness is fixed at nu = 0.5")

    def marginal_prob(self, d):
        """Wet probability at distance d with the latent field integrated out."""
        d = np.asarray(d, float)
        var_z = self.residual.sigma**2 * (1 - matern_correlation(d, self.residual) ** 2)
        return special.ndtr(self.mu(d) / np.sqrt(self.nugget_sd**2 + var_z))


@dataclass(frozen=True)
class ThresholdModel:
    p: float
    kind = "threshold"

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ValueError(f"zero probability must lie in [0, 1), got {self.p}")


OCCURRENCE_KINDS = ("nonzero", "probit", "spatial-probit", "threshold")


# ---------------------------------------------------------------------------
# threshold model


def _event_values(events) -> np.ndarray:
    return events.values if isinstance(events, PrecipCube) else np.asarray(events, float)


def fit_threshold_model(occurrence_events, region_mask) -> ThresholdModel:
    """p = share of zeros among in-region, usable entries over all events."""
    v = _event_values(occurrence_events)
    region = np.asarray(region_mask, bool)
    if v.shape[0] == 0:
        raise OccurrenceFitError("need at least one event")
    sub = v[:, region]
    sub = sub[np.isfinite(sub)]
    if sub.size == 0:
        raise OccurrenceFitError("region has no usable sites")
    return ThresholdModel(float(1.0 - np.mean(sub > 0)))


def threshold_quantile(values, p: float) -> float:
    """Order statistic at floor(p n) of the pooled finite values."""
    x = np.sort(np.asarray(values, float)[np.isfinite(values)])
    if x.size == 0:
        raise ValueError("no finite values to pool")
    return float(x[min(int(np.floor(p * x.size)), x.size - 1)])


def apply_threshold_model(fields, model: ThresholdModel, s0: int, sites=None) -> np.ndarray:
    """Dry wherever a field value is strictly below the pooled p-quantile of the batch.

    ``sites`` restricts both the pooling and the output to a subset (others get 1).
    """
    f = np.atleast_2d(np.asarray(fields, float))
    occ = np.ones(f.shape)
    if model.p > 0:
        cols = np.arange(f.shape[1]) if sites is None else np.flatnonzero(np.asarray(sites, bool))
        q = threshold_quantile(f[:, cols], model.p)
        sub = f[:, cols]
        occ[:, cols] = np.where(sub < q, 0.0, 1.0)
    occ[:, s0] = 1.0
    return occ if np.ndim(fields) == 2 else occ[0]


# ---------------------------------------------------------------------------
# independent probit


def _site_counts(occurrence_events, s0: int, geometry: GridGeometry):
    v = _event_values(occurrence_events)
    obs = np.isfinite(v)
    ones = np.where(obs, v > 0, False).sum(axis=0).astype(float)
    total = obs.sum(axis=0).astype(float)
    d = geometry.distances_from(s0)
    keep = (total > 0) & (np.arange(geometry.n_sites) != s0)
    return d[keep], ones[keep], total[keep]


def fit_probit(
    occurrence_events, s0: int, geometry: GridGeometry, knot_spacing: float = 5.0, anchor: float = MU_ANCHOR,
) -> Probit:
    """MAP of the slope coefficients under independent N(0, 10^2) priors."""
    d, ones, total = _site_counts(occurrence_events, s0, geometry)
    if total.sum() == 0:
        raise OccurrenceFitError("no usable occurrence data")
    zeros = total - ones
    if ones.sum() == 0 or zeros.sum() == 0:
        warnings.warn("occurrence data contain only one class; the fit is prior-dominated", RuntimeWarning)
    spline = MuSpline.for_distances(geometry.distances_from(s0).max(), knot_spacing, anchor)
    B = MuSpline.basis(d, knot_spacing, len(spline.coefs))

    def fun(c):
        mu = anchor + B @ c
        lp, lm = special.log_ndtr(mu), special.log_ndtr(-mu)
        f = -(ones @ lp + zeros @ lm) + 0.5 * c @ c / COEF_PRIOR_SD**2
        rp = np.exp(-0.5 * mu**2 - 0.5 * np.log(2 * np.pi) - lp)
        rm = np.exp(-0.5 * mu**2 - 0.5 * np.log(2 * np.pi) - lm)
        g = -B.T @ (ones * rp - zeros * rm) + c / COEF_PRIOR_SD**2
        return f, g

    res = optimize.minimize(fun, np.zeros(len(spline.coefs)), jac=True, method="L-BFGS-B",
                            options={"maxiter": 5000, "gtol": 1e-9, "ftol": 1e-15})
    if not res.success:
        raise OccurrenceFitError(f"probit fit did not converge: {res.message}")
    return Probit(MuSpline(knot_spacing, tuple(res.x), anchor))


# ---------------------------------------------------------------------------
# spatial probit via per-event Laplace approximation


def _probit_derivs(Y, f):
    """log Phi(y f) and its first three derivatives in f; zero where Y == 0 (missing)."""
    z = Y * f
    logc = special.log_ndtr(z)
    r = np.exp(-0.5 * z * z - 0.5 * np.log(2 * np.pi) - logc)
    obs = Y != 0
    ll = np.where(obs, logc, 0.0)
    d1 = np.where(obs, Y * r, 0.0)
    w = np.where(obs, r * (z + r), 0.0)
    d3 = np.where(obs, Y * r * ((z + r) * (z + 2 * r) - 1), 0.0)
    return ll, d1, w, d3


@dataclass
class _LaplaceBatch:
    log_z: np.ndarray
    a: np.ndarray
    f: np.ndarray
    grad_mean: np.ndarray  # d log Z / d m per event
    M: np.ndarray  # sum over events of the matrix paired with dK


def _laplace_events(K, m, Y, f0, tol=1e-9, maxiter=100, first_event=0) -> _LaplaceBatch:
    E, n = Y.shape
    eye = np.eye(n)
    f = f0.copy()
    a = np.linalg.solve(K, (f - m).T).T

    def psi(a_, f_):
        ll = np.where(Y != 0, special.log_ndtr(Y * f_), 0.0)
        return ll.sum(axis=1) - 0.5 * np.einsum("ei,ei->e", a_, f_ - m)

    obj = psi(a, f)
    done = np.zeros(E, bool)
    for it in range(maxiter):
        _, g, W, _ = _probit_derivs(Y, f)
        sW = np.sqrt(W)
        B = eye + sW[:, :, None] * K[None] * sW[:, None, :]
        b = W * (f - m) + g
        c = sW * (b @ K)
        sol = np.linalg.solve(B, c[..., None])[..., 0]
        a_new = b - sW * sol
        step = a_new - a
        s = np.ones(E)
        for _ in range(30):
            at = a + s[:, None] * step
            ft = at @ K + m
            ot = psi(at, ft)
            bad = ot < obj - 1e-12 * np.abs(obj)
            if not bad.any():
                break
            s = np.where(bad, 0.5 * s, s)
        delta = np.abs(ot - obj)
        a, f, obj = at, ft, ot
        done = delta < tol * (1 + np.abs(obj))
        if done.all():
            break
    if not done.all():
        bad = int(np.flatnonzero(~done)[0]) + first_event
        raise OccurrenceFitError(f"latent mode search did not converge for event {bad}")

    ll, g, W, d3 = _probit_derivs(Y, f)
    sW = np.sqrt(W)
    B = eye + sW[:, :, None] * K[None] * sW[:, None, :]
    L = np.linalg.cholesky(B)
    log_z = -0.5 * np.einsum("ei,ei->e", a, f - m) + ll.sum(axis=1) - np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
    Binv = np.linalg.inv(B)
    R = sW[:, :, None] * Binv * sW[:, None, :]
    KR = K[None] @ R
    diag_krk = np.einsum("eij,ji->ei", KR, K)
    s2 = 0.5 * (np.diag(K)[None] - diag_krk) * d3
    t = s2 - np.einsum("eij,ej->ei", R, s2 @ K)
    grad_mean = g + t
    M = 0.5 * np.einsum("ei,ej->ij", g, g) - 0.5 * R.sum(axis=0) + np.einsum("ei,ej->ij", t, g)
    return _LaplaceBatch(log_z, a, f, grad_mean, M)


@dataclass(frozen=True)
class SpatialProbitPriors:
    residual_pc: PcPriorMatern = PcPriorMatern(70.0, 0.05, 5.0, 0.01, dim=2)
    coef_sd: float = COEF_PRIOR_SD


class SpatialProbitObjective:
    """Negative Laplace-approximate log posterior of (slope coefs, log range, log sd)."""

    def __init__(self, occurrence_events, s0: int, geometry: GridGeometry, knot_spacing: float = 5.0,
                 anchor: float = MU_ANCHOR, priors: SpatialProbitPriors = SpatialProbitPriors(), chunk: int = 64,
                 site_mask=None):
        v = _event_values(occurrence_events)
        keep = np.ones(geometry.n_sites, bool) if site_mask is None else np.asarray(site_mask, bool).copy()
        keep[s0] = False
        keep &= np.isfinite(v).any(axis=0)
        self.sites = np.flatnonzero(keep)
        V = v[:, self.sites]
        self.Y = np.where(np.isfinite(V), np.where(V > 0, 1.0, -1.0), 0.0)
        coords = geometry.coords[self.sites]
        self.dist = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
        self.d0 = geometry.distances_from(s0)[self.sites]
        self.spline = MuSpline.for_distances(geometry.distances_from(s0).max(), knot_spacing, anchor)
        self.basis = MuSpline.basis(self.d0, knot_spacing, len(self.spline.coefs))
        self.priors = priors
        self.chunk = chunk
        self.n_coefs = len(self.spline.coefs)
        self._f = None

    def _mean(self, c):
        return self.spline.anchor + self.basis @ c

    def __call__(self, x):
        c, lr, ls = x[: self.n_coefs], x[-2], x[-1]
        mp = MaternParams(0.5, float(np.exp(lr)), float(np.exp(ls)))
        K = constrained_covariance(self.dist, self.d0, mp) + 1e-9 * np.eye(len(self.sites))
        dK_rho = constrained_covariance_dlogrho(self.dist, self.d0, mp)
        m = self._mean(c)
        E = self.Y.shape[0]
        f0 = np.broadcast_to(m, self.Y.shape).copy() if self._f is None else self._f
        total = 0.0
        gm = np.zeros(len(self.sites))
        M = np.zeros_like(K)
        fs = np.empty_like(f0)
        for i in range(0, E, self.chunk):
            sl = slice(i, i + self.chunk)
            res = _laplace_events(K, m, self.Y[sl], f0[sl], first_event=i)
            total += res.log_z.sum()
            gm += res.grad_mean.sum(axis=0)
            M += res.M
            fs[sl] = res.f
        self._f = fs
        g = np.empty(len(x))
        g[: self.n_coefs] = self.basis.T @ gm
        g[-2] = np.sum(M * dK_rho)
        g[-1] = np.sum(M * 2 * (K - 1e-9 * np.eye(len(K))))
        lp = -0.5 * c @ c / self.priors.coef_sd**2 + float(self.priors.residual_pc.log_density_log_scale(lr, ls))
        glr, gls = self.priors.residual_pc.grad_log_scale(lr, ls)
        g[: self.n_coefs] -= c / self.priors.coef_sd**2
        g[-2] += glr
        g[-1] += gls
        return -(total + lp), -g


def fit_spatial_probit(
    occurrence_events, s0: int, geometry: GridGeometry, knot_spacing: float = 5.0, anchor: float = MU_ANCHOR,
    priors: SpatialProbitPriors = SpatialProbitPriors(), init: Probit | None = None, maxiter: int = 500,
    site_mask=None,
) -> SpatialProbit:
    """Laplace-approximate MAP of the latent-field probit; the latent field is integrated per event."""
    if init is None:
        init = fit_probit(occurrence_events, s0, geometry, knot_spacing, anchor)
    obj = SpatialProbitObjective(occurrence_events, s0, geometry, knot_spacing, anchor, priors, site_mask=site_mask)
    x0 = np.concatenate([np.asarray(init.mu.coefs) * np.sqrt(2.0), [np.log(20.0), 0.0]])
    f0 = abs(obj(x0)[0])
    scale = 1.0 / max(1.0, f0)

    def scaled(x):
        f, g = obj(x)
        return f * scale, g * scale

    res = optimize.minimize(scaled, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-7})
    x = res.x
    if not res.success:
        log.warning("spatial probit optimizer stopped: %s", res.message)
    n = len(x)
    H = np.empty((n, n))
    h = 1e-4
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (obj(x + e)[1] - obj(x - e)[1]) / (2 * h)
    H = 0.5 * (H + H.T)
    spline = MuSpline(knot_spacing, tuple(x[: obj.n_coefs]), anchor)
    return SpatialProbit(spline, MaternParams(0.5, float(np.exp(x[-2])), float(np.exp(x[-1]))), 1.0, H)


# ---------------------------------------------------------------------------
# simulation


def simulate_occurrence(
    model, geometry: GridGeometry, s0: int, rng: np.random.Generator, companion=None, size: int | None = None,
    sampler=None, sites=None,
) -> np.ndarray:
    """Binary field(s); I(s0) = 1 always.  ``companion`` is required by the threshold model."""
    m = 1 if size is None else int(size)
    n = geometry.n_sites
    if isinstance(model, Nonzero):
        out = np.ones((m, n))
    elif isinstance(model, Probit):
        p = model.prob(geometry.distances_from(s0))
        out = (rng.uniform(size=(m, n)) < p).astype(float)
    elif isinstance(model, SpatialProbit):
        if sampler is None:
            sampler = build_sampler(geometry, model.residual, constraint=s0)
        mu = model.mu(geometry.distances_from(s0))
        latent = mu + sampler.sample(rng, m) + model.nugget_sd * rng.standard_normal((m, n))
        out = (latent > 0).astype(float)
    elif isinstance(model, ThresholdModel):
        if companion is None:
            raise ValueError("the threshold model needs the companion intensity field(s)")
        out = np.atleast_2d(apply_threshold_model(companion, model, s0, sites))
    else:
        raise TypeError(f"unknown occurrence model {type(model).__name__}")
    out[:, s0] = 1.0
    return out[0] if size is None and out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# empirical curves


@dataclass
class Curve:
    x: np.ndarray
    estimate: np.ndarray
    count: np.ndarray
    x_name: str = "x"

    def trend(self, min_count: int = 1) -> tuple[float, float]:
        """Slope of estimate against x by binomially weighted least squares, with its standard error.

        Bins with estimates of exactly 0 or 1 get the weight of a half-count correction.
        """
        ok = np.isfinite(self.estimate) & (self.count >= min_count) & np.isfinite(self.x)
        x, y, n = self.x[ok], self.estimate[ok], self.count[ok].astype(float)
        if len(x) < 3:
            raise ValueError("need at least three populated bins")
        pc = (y * n + 0.5) / (n + 1.0)
        w = n / (pc * (1 - pc))
        X = np.column_stack([np.ones_like(x), x])
        cov = np.linalg.inv(X.T @ (w[:, None] * X))
        beta = cov @ (X.T @ (w * y))
        return float(beta[1]), float(np.sqrt(cov[1, 1]))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.x_name},estimate,count\n")
            for x, e, c in zip(self.x, self.estimate, self.count):
                fh.write(f"{float(x)!r},{'NA' if np.isnan(e) else repr(float(e))},{int(c)}\n")


def empirical_p_of_distance(occurrence_events, s0: int, geometry: GridGeometry, window: float = 1.0,
                            step: float = 1.0, dmax: float | None = None) -> Curve:
    """Share of wet sites within +-window/2 of each distance on the grid, pooled over events."""
    if not window > 0:
        raise ValueError("window must be positive")
    v = _event_values(occurrence_events)
    dist = geometry.distances_from(s0)
    dmax = dist.max() if dmax is None else dmax
    grid = np.arange(0.0, dmax + 1e-9, step)
    obs = np.isfinite(v)
    ones = np.where(obs, v > 0, False).sum(axis=0)
    tot = obs.sum(axis=0)
    est = np.full(len(grid), np.nan)
    cnt = np.zeros(len(grid), int)
    for i, d in enumerate(grid):
        sel = np.abs(dist - d) <= window / 2
        cnt[i] = tot[sel].sum()
        if cnt[i]:
            est[i] = ones[sel].sum() / cnt[i]
    return Curve(grid, est, cnt, "distance_km")


NEIGHBOR_BIN_EDGES = (0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0, np.inf)


def empirical_p_of_neighbors(fields, geometry: GridGeometry, edges=NEIGHBOR_BIN_EDGES, site_mask=None,
                             target_mask=None) -> Curve:
    """Wet share binned by the mean of the available rook neighbours (mm/h).

    The first bin holds exactly-zero neighbour means; the rest are (lo, hi].
    ``site_mask`` treats sites outside it as unobserved everywhere; ``target_mask``
    only limits which sites are scored, their neighbours still count.
    """
    v = _event_values(fields)
    v = np.atleast_2d(v)
    if site_mask is not None:
        v = np.where(np.asarray(site_mask, bool)[None], v, np.nan)
    nb = geometry.neighbors4()
    padded = np.concatenate([v, np.full((v.shape[0], 1), np.nan)], axis=1)
    nbv = padded[:, np.where(nb < 0, v.shape[1], nb)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ybar = np.nanmean(nbv, axis=2)
    ok = np.isfinite(ybar) & np.isfinite(v)
    if target_mask is not None:
        ok &= np.asarray(target_mask, bool)[None]
    yb, wet = ybar[ok], v[ok] > 0
    edges = np.asarray(edges, float)
    mids = [0.0]
    est = []
    cnt = []
    sel = yb == 0
    cnt.append(int(sel.sum()))
    est.append(wet[sel].mean() if sel.any() else np.nan)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (yb > lo) & (yb <= hi)
        mids.append(0.5 * (lo + hi) if np.isfinite(hi) else lo)
        cnt.append(int(sel.sum()))
        est.append(wet[sel].mean() if sel.any() else np.nan)
    return Curve(np.array(mids), np.array(est, float), np.array(cnt), "neighbor_mean_mm_h")
