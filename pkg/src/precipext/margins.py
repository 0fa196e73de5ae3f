"""Gamma-GP split marginal model for nonzero precipitation intensity.

Both families are indexed by a quantile: the gamma by its alpha-quantile ``psi_alpha``
(rate = G^{-1}(alpha; kappa, 1) / psi_alpha) and the generalised Pareto by its
beta-quantile ``phi_beta``.  Setting alpha = p_u makes ``psi_alpha`` the split
threshold u_t directly.  Each log-quantile varies over days under a 1-D Matérn
(nu = 1.5) smoothing prior and is fitted by MAP with a Gaussian approximation
at the mode; the smoothing hyperparameters are chosen on a grid by the
Laplace-approximate marginal posterior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

from .datastore import PrecipCube
from .randfield import MaternParams, PcPriorMatern, jittered_cholesky, matern_correlation

log = logging.getLogger(__name__)

MIN_GAMMA_OBS = 100
MIN_GP_EXCEEDANCES = 30
XI_MAX = 0.5


class MarginalFitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# gamma, quantile parametrisation


@dataclass(frozen=True)
class GammaQuantileParams:
    kappa: float
    psi_alpha: float
    alpha: float

    def __post_init__(self):
        if not (np.all(np.asarray(self.kappa) > 0) and np.all(np.asarray(self.psi_alpha) > 0)):
            raise ValueError("gamma shape and quantile parameter must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def rate(self):
        return special.gammaincinv(self.kappa, self.alpha) / np.asarray(self.psi_alpha, float)


def gamma_q_pdf(x, params: GammaQuantileParams):
    x = np.asarray(x, float)
    if np.any(x <= 0):
        raise ValueError("gamma density needs x > 0")
    k, r = params.kappa, params.rate
    return np.exp(k * np.log(r) + (k - 1) * np.log(x) - r * x - special.gammaln(k))


def gamma_q_cdf(x, params: GammaQuantileParams):
    x = np.asarray(x, float)
    if np.any(x < 0):
        raise ValueError("gamma cdf needs x >= 0")
    return special.gammainc(params.kappa, params.rate * x)


def gamma_q_quantile(p, params: GammaQuantileParams):
    p = np.asarray(p, float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    return special.gammaincinv(params.kappa, p) / params.rate


# ---------------------------------------------------------------------------
# generalised Pareto, quantile parametrisation


def _expm1_over(xi, L):
    """(exp(xi L) - 1) / xi with the xi -> 0 limit L."""
    xi = np.asarray(xi, float)
    L = np.asarray(L, float)
    small = np.abs(xi * L) < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        full = np.expm1(xi * L) / np.where(small, 1.0, xi)
    return np.where(small, L * (1 + 0.5 * xi * L), full)


def _log1p_over(xi, v_over_xi):
    """log1p(xi t) / xi for t = v_over_xi, with the xi -> 0 limit t."""
    xi = np.asarray(xi, float)
    t = np.asarray(v_over_xi, float)
    small = xi < 1e-12
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        full = np.log1p(xi * t) / np.where(small, 1.0, xi)
        return np.where(small, t - 0.5 * xi * t * t, full)


@dataclass(frozen=True)
class GPQuantileParams:
    xi: float
    phi_beta: float
    beta: float = 0.5

    def __post_init__(self):
        if not 0 <= self.xi <= XI_MAX:
            raise ValueError(f"xi must lie in [0, {XI_MAX}], got {self.xi}")
        if not np.all(np.asarray(self.phi_beta) > 0):
            raise ValueError("phi_beta must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")

    @property
    def c_over_xi(self):
        return _expm1_over(self.xi, -np.log1p(-self.beta))

    @property
    def scale(self):
        """Classical GP scale sigma with H(x) = 1 - (1 + xi x / sigma)^(-1/xi)."""
        return np.asarray(self.phi_beta, float) / self.c_over_xi


def gp_log_survival(x, params: GPQuantileParams):
    x = np.asarray(x, float)
    if np.any(x < 0):
        raise ValueError("GP support is x >= 0 for xi >= 0")
    t = params.c_over_xi * x / params.phi_beta
    return -_log1p_over(params.xi, t)


def gp_cdf(x, params: GPQuantileParams):
    return -np.expm1(gp_log_survival(x, params))


def gp_logpdf(x, params: GPQuantileParams):
    x = np.asarray(x, float)
    if np.any(x < 0):
        raise ValueError("GP support is x >= 0 for xi >= 0")
    cx = params.c_over_xi
    t = cx * x / params.phi_beta
    return np.log(cx) - np.log(params.phi_beta) - _log1p_over(params.xi, t) - np.log1p(params.xi * t)


def gp_quantile(p, params: GPQuantileParams):
    p = np.asarray(p, float)
    if np.any((p < 0) | (p >= 1)):
        raise ValueError("p must lie in [0, 1)")
    return params.phi_beta * _expm1_over(params.xi, -np.log1p(-p)) / params.c_over_xi


# ---------------------------------------------------------------------------
# PC prior for the tail parameter


@dataclass(frozen=True)
class PcPriorXi:
    """PC prior for xi shrinking towards the exponential tail, truncated to [0, upper)."""

    lam: float = 7.0
    upper: float = XI_MAX

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def _untruncated_cdf(self, xi):
        xi = np.asarray(xi, float)
        return -np.expm1(-self.lam * xi / np.sqrt(2 * (1 - xi)))

    @property
    def mass(self) -> float:
        return float(self._untruncated_cdf(self.upper))

    def log_density(self, xi):
        xi = np.asarray(xi, float)
        if np.any((xi < 0) | (xi >= self.upper)):
            raise ValueError(f"xi outside [0, {self.upper})")
        lam = self.lam
        return (
            np.log(lam) + np.log1p(-xi / 2) - 1.5 * np.log1p(-xi) - 0.5 * np.log(2)
            - lam * xi / np.sqrt(2 * (1 - xi)) - np.log(self.mass)
        )

    def density(self, xi):
        return np.exp(self.log_density(xi))

    def cdf(self, xi):
        """Truncated cdf, closed form."""
        xi = np.clip(np.asarray(xi, float), 0, self.upper)
        return self._untruncated_cdf(xi) / self.mass

    def cdf_quadrature(self, xi: float) -> float:
        val, _ = integrate.quad(lambda x: float(self.density(x)), 0.0, xi, epsabs=1e-13, epsrel=1e-12)
        return val

    def dlog_density(self, xi):
        xi = np.asarray(xi, float)
        lam = self.lam
        s = np.sqrt(2 * (1 - xi))
        d_pen = lam * (1 / s + xi / s**3)
        return -0.5 / (1 - xi / 2) + 1.5 / (1 - xi) - d_pen


# ---------------------------------------------------------------------------
# temporal MAP engine


@dataclass(frozen=True)
class SmoothingPrior:
    """1-D Matérn (nu fixed) prior on a day-indexed log-parameter, PC-calibrated.

    The hyperparameters (range in days, marginal sd) are selected from the grids.
    """

    range0: float = 28.0
    range_exceed_prob: float = 0.05
    sd0: float = 3.0
    sd_exceed_prob: float = 0.05
    nu: float = 1.5
    range_grid: tuple = (3.5, 7.0, 14.0, 28.0, 56.0, 112.0)
    sd_grid: tuple = (0.025, 0.05, 0.1, 0.2, 0.4, 0.8)

    @property
    def pc(self) -> PcPriorMatern:
        return PcPriorMatern(self.range0, self.range_exceed_prob, self.sd0, self.sd_exceed_prob, dim=1)


@dataclass
class TemporalTrack:
    """MAP estimate of a day-indexed log-parameter plus its marginal posterior sd."""

    days: np.ndarray
    values: np.ndarray
    sd: np.ndarray
    smoothing_range: float | None = None
    smoothing_sd: float | None = None

    def at(self, days) -> np.ndarray:
        idx = np.searchsorted(self.days, days)
        idx = np.clip(idx, 0, len(self.days) - 1)
        if np.any(self.days[idx] != np.asarray(days)):
            missing = np.setdiff1d(np.asarray(days), self.days)
            raise KeyError(f"days not covered by the fitted track: {missing[:5].tolist()}")
        return self.values[idx]


@dataclass
class _Problem:
    """Day-indexed log-likelihood: returns (ll, dll/deta, -d2ll/deta2 diag, dll/dextra)."""

    n_days: int
    loglik: Callable
    extra_init: float
    extra_bounds: tuple
    extra_logprior: Callable = lambda e: 0.0
    extra_dlogprior: Callable = lambda e: 0.0
    eta_init: np.ndarray = None


@dataclass
class _InnerResult:
    eta: np.ndarray
    extra: float
    objective: float
    hessian: np.ndarray
    jac: np.ndarray
    log_marginal: float
    converged: bool
    grad_norm: float


def _fd_step(e, bounds):
    h = 1e-5 * max(1.0, abs(e))
    lo, hi = bounds
    if lo is not None and e - h < lo:
        return h, "forward"
    if hi is not None and e + h > hi:
        return h, "backward"
    return h, "central"


def _solve_inner(problem: _Problem, days, prior_cov: np.ndarray | None, maxiter=20000) -> _InnerResult:
    D = problem.n_days
    if prior_cov is None:
        L = None
        nz = D
        z0 = np.concatenate([problem.eta_init, [problem.extra_init]])
    else:
        L = jittered_cholesky(prior_cov, float(np.max(np.diag(prior_cov))))
        nz = D + 1
        z0 = np.concatenate([[np.mean(problem.eta_init)], np.zeros(D), [problem.extra_init]])

    def unpack(z):
        e = z[-1]
        if L is None:
            return z[:D], e
        return z[0] + L @ z[1:-1], e

    scale = 1.0

    def fun(z):
        eta, e = unpack(z)
        ll, g, _, ge = problem.loglik(eta, e)
        f = -ll - problem.extra_logprior(e)
        grad = np.empty_like(z)
        grad[-1] = -ge - problem.extra_dlogprior(e)
        if L is None:
            grad[:D] = -g
        else:
            w = z[1:-1]
            f += 0.5 * w @ w
            grad[0] = -g.sum()
            grad[1:-1] = -(L.T @ g) + w
        return f * scale, grad * scale

    f0, _ = fun(z0)
    scale = 1.0 / max(1.0, abs(f0))
    bounds = [(None, None)] * nz + [problem.extra_bounds]
    res = optimize.minimize(
        fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": maxiter, "maxfun": 4 * maxiter, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 30},
    )
    z = res.x
    eta, e = unpack(z)
    f, g = fun(z)
    f /= scale
    g /= scale
    lo, hi = problem.extra_bounds
    g_proj = g.copy()
    if (lo is not None and z[-1] <= lo and g[-1] > 0) or (hi is not None and z[-1] >= hi and g[-1] < 0):
        g_proj[-1] = 0.0
    grad_norm = float(np.linalg.norm(g_proj))

    # Hessian of -loglik in (eta, extra); the eta block is diagonal.
    _, g_eta, h_eta, g_e = problem.loglik(eta, e)
    h, mode = _fd_step(e, problem.extra_bounds)
    if mode == "central":
        _, gp, _, gep = problem.loglik(eta, e + h)
        _, gm, _, gem = problem.loglik(eta, e - h)
        denom = 2 * h
    elif mode == "forward":
        _, gp, _, gep = problem.loglik(eta, e + h)
        gm, gem = g_eta, g_e
        denom = h
    else:
        gp, gep = g_eta, g_e
        _, gm, _, gem = problem.loglik(eta, e - h)
        denom = h
    cross = -(gp - gm) / denom
    hee = -(gep - gem) / denom
    pe = problem.extra_dlogprior
    hee_prior = -(pe(e + h) - pe(e - h)) / (2 * h) if mode == "central" else 0.0

    if L is None:
        H = np.zeros((D + 1, D + 1))
        H[np.arange(D), np.arange(D)] = h_eta
        H[:D, D] = H[D, :D] = cross
        H[D, D] = hee + hee_prior
        J = np.eye(D + 1)
    else:
        J = np.zeros((D + 1, D + 2))
        J[:D, 0] = 1.0
        J[:D, 1:-1] = L
        J[D, -1] = 1.0
        A = J[:D, :-1]
        H = np.zeros((D + 2, D + 2))
        H[:-1, :-1] = A.T @ (h_eta[:, None] * A)
        H[:-1, -1] = H[-1, :-1] = A.T @ cross
        H[-1, -1] = hee + hee_prior
        H[1:-1, 1:-1] += np.eye(D)
    sign, logdet = np.linalg.slogdet(H)
    log_marginal = -f - 0.5 * logdet if sign > 0 else -np.inf
    return _InnerResult(eta, float(e), f, H, J, float(log_marginal), bool(res.success), grad_norm)


def _posterior_sd(inner: _InnerResult) -> tuple[np.ndarray, float]:
    H = inner.hessian
    # A bounded extra at its boundary may leave H indefinite; regularise the diagonal.
    try:
        cov = np.linalg.inv(H)
        if np.any(np.diag(cov) < 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        H = H + np.eye(len(H)) * 1e-8 * np.abs(np.diag(H)).max()
        cov = np.linalg.pinv(H)
    cov_eta_e = inner.jac @ cov @ inner.jac.T
    var = np.clip(np.diag(cov_eta_e), 0, None)
    return np.sqrt(var[:-1]), float(np.sqrt(var[-1]))


@dataclass
class TemporalFit:
    track: TemporalTrack
    extra: float
    extra_sd: float
    log_marginal: float
    grid: list = field(default_factory=list)
    grad_norm: float = 0.0


def _fit_temporal(problem: _Problem, days: np.ndarray, smoothing: SmoothingPrior | None) -> TemporalFit:
    days = np.asarray(days)
    if smoothing is None:
        inner = _solve_inner(problem, days, None)
        best = (None, None, inner)
        grid = []
    else:
        dd = np.abs(days[:, None] - days[None, :]).astype(float)
        pc = smoothing.pc
        grid = []
        best = None
        for rng_ in smoothing.range_grid:
            corr = matern_correlation(dd, MaternParams(smoothing.nu, rng_))
            for sd in smoothing.sd_grid:
                inner = _solve_inner(problem, days, sd**2 * corr)
                lp = inner.log_marginal + float(pc.log_density_log_scale(np.log(rng_), np.log(sd)))
                grid.append((rng_, sd, lp))
                if best is None or lp > best[3]:
                    best = (rng_, sd, inner, lp)
                problem.eta_init = inner.eta
                problem.extra_init = inner.extra
        log.debug("smoothing hyperparameters: range %.1f d, sd %.3f", best[0], best[1])
        best = best[:3]
    rng_, sd, inner = best
    if inner.grad_norm > 1e-3 * max(1.0, abs(inner.objective)) ** 0.5:
        raise MarginalFitError(f"optimizer did not converge (gradient norm {inner.grad_norm:.3e})")
    eta_sd, e_sd = _posterior_sd(inner)
    track = TemporalTrack(days, inner.eta, eta_sd, rng_, sd)
    return TemporalFit(track, inner.extra, e_sd, inner.log_marginal, grid, inner.grad_norm)


# ---------------------------------------------------------------------------
# gamma and GP likelihoods


def _day_index(obs_days, days):
    return np.searchsorted(days, obs_days)


def _gamma_q_of_kappa(kappa, alpha):
    return special.gammaincinv(kappa, alpha)


@dataclass
class GammaFit:
    track: TemporalTrack  # log psi_alpha per day
    kappa: float
    log_kappa_sd: float
    alpha: float
    n_obs: int
    log_marginal: float
    grid: list = field(default_factory=list)

    @property
    def psi(self) -> np.ndarray:
        return np.exp(self.track.values)


def fit_gamma_values(
    x, obs_days, alpha: float = 0.95, smoothing: SmoothingPrior | None = SmoothingPrior(),
    min_obs: int = MIN_GAMMA_OBS,
) -> GammaFit:
    """MAP fit of the quantile-parametrised gamma with a smooth day-varying log psi_alpha."""
    x = np.asarray(x, float)
    obs_days = np.asarray(obs_days)
    ok = np.isfinite(x) & (x > 0)
    x, obs_days = x[ok], obs_days[ok]
    if len(x) < min_obs:
        raise MarginalFitError(f"need at least {min_obs} nonzero values for the gamma fit, got {len(x)}")
    days = np.unique(obs_days)
    k = _day_index(obs_days, days)
    D = len(days)
    n = np.bincount(k, minlength=D).astype(float)
    S = np.bincount(k, weights=x, minlength=D)
    Lg = np.bincount(k, weights=np.log(x), minlength=D)
    if smoothing is None and np.any(n == 0):
        raise MarginalFitError("every fitted day needs data when smoothing is off")

    def loglik(eta, lk):
        kap = np.exp(lk)
        q = _gamma_q_of_kappa(kap, alpha)
        hq = 1e-6 * kap
        dq = (_gamma_q_of_kappa(kap + hq, alpha) - _gamma_q_of_kappa(kap - hq, alpha)) / (2 * hq)
        r = q * np.exp(-eta)
        logr = np.log(q) - eta
        ll = np.sum(n * (kap * logr - special.gammaln(kap)) + (kap - 1) * Lg - r * S)
        g = -n * kap + r * S
        hdiag = r * S
        dll_dk = np.sum(n * (logr - special.digamma(kap)) + Lg + (n * kap / q - S * np.exp(-eta)) * dq)
        return ll, g, hdiag, dll_dk * kap

    mean = S / np.maximum(n, 1)
    logmean = Lg / np.maximum(n, 1)
    s = np.log(np.maximum(mean, 1e-300)) - logmean
    kap0 = float(np.clip(np.median(((3 - s + np.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s))[n > 0]), 0.05, 50))
    psi0 = special.gammaincinv(kap0, alpha) * np.where(n > 0, mean, np.sum(S) / np.sum(n)) / kap0
    problem = _Problem(D, loglik, np.log(kap0), (None, None), eta_init=np.log(psi0))
    fit = _fit_temporal(problem, days, smoothing)
    return GammaFit(fit.track, float(np.exp(fit.extra)), fit.extra_sd, alpha, int(len(x)), fit.log_marginal, fit.grid)


@dataclass
class GPFit:
    track: TemporalTrack  # log phi_beta per day
    xi: float
    xi_sd: float
    beta: float
    n_exceedances: int
    log_marginal: float
    grid: list = field(default_factory=list)

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.track.values)


def fit_gp_exceedances(
    y, obs_days, beta: float = 0.5, xi_prior: PcPriorXi = PcPriorXi(7.0),
    smoothing: SmoothingPrior | None = SmoothingPrior(), days=None,
    min_exceedances: int = MIN_GP_EXCEEDANCES,
) -> GPFit:
    """MAP fit of the quantile-parametrised GP to exceedances ``y`` (already minus u_t)."""
    y = np.asarray(y, float)
    obs_days = np.asarray(obs_days)
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise MarginalFitError("exceedances must be finite and strictly positive")
    if len(y) < min_exceedances:
        raise MarginalFitError(f"refusing to fit the GP tail with {len(y)} < {min_exceedances} exceedances")
    days = np.unique(obs_days) if days is None else np.asarray(days)
    k = _day_index(obs_days, days)
    if np.any(days[np.clip(k, 0, len(days) - 1)] != obs_days):
        raise MarginalFitError("exceedance days not covered by the day axis")
    D = len(days)
    n = np.bincount(k, minlength=D).astype(float)
    if smoothing is None and np.any(n == 0):
        raise MarginalFitError("every fitted day needs data when smoothing is off")
    L = -np.log1p(-beta)

    def ll_only(eta, xi):
        cx = _expm1_over(xi, L)
        t = cx * y * np.exp(-eta[k])
        return np.sum(np.log(cx) - eta[k] - _log1p_over(xi, t) - np.log1p(xi * t))

    def loglik(eta, xi):
        cx = _expm1_over(xi, L)
        t = cx * y * np.exp(-eta[k])
        v = xi * t
        ll = np.sum(np.log(cx) - eta[k] - _log1p_over(xi, t) - np.log1p(v))
        gobs = -1.0 + (1 + xi) * t / (1 + v)
        hobs = (1 + xi) * t / (1 + v) ** 2
        g = np.bincount(k, weights=gobs, minlength=D)
        hd = np.bincount(k, weights=hobs, minlength=D)
        h = 1e-6
        if xi - h < 0:
            dxi = (ll_only(eta, xi + h) - ll) / h
        elif xi + h >= XI_MAX:
            dxi = (ll - ll_only(eta, xi - h)) / h
        else:
            dxi = (ll_only(eta, xi + h) - ll_only(eta, xi - h)) / (2 * h)
        return ll, g, hd, dxi

    ssum = np.bincount(k, weights=y, minlength=D)
    # exponential start: the beta-quantile is mean * L when xi = 0
    phi0 = np.where(n > 0, ssum / np.maximum(n, 1), np.mean(y)) * L
    problem = _Problem(
        D, loglik, 0.1, (0.0, XI_MAX - 1e-6),
        extra_logprior=lambda xi: float(xi_prior.log_density(min(max(xi, 0.0), XI_MAX - 1e-9))),
        extra_dlogprior=lambda xi: float(xi_prior.dlog_density(min(max(xi, 0.0), XI_MAX - 1e-9))),
        eta_init=np.log(phi0),
    )
    fit = _fit_temporal(problem, days, smoothing)
    return GPFit(fit.track, fit.extra, fit.extra_sd, beta, int(len(y)), fit.log_marginal, fit.grid)


# ---------------------------------------------------------------------------
# split model


@dataclass(frozen=True, eq=False)
class MarginalModel:
    """Split marginal for intensities: gamma below u_t, rescaled GP above, per day."""

    days: np.ndarray
    log_psi: np.ndarray
    kappa: float
    log_phi: np.ndarray
    xi: float
    p_u: float = 0.95
    beta: float = 0.5
    log_psi_sd: np.ndarray | None = None
    log_phi_sd: np.ndarray | None = None
    kappa_sd: float | None = None
    xi_sd: float | None = None

    def __post_init__(self):
        if not 0 < self.p_u < 1:
            raise ValueError("p_u must lie in (0, 1)")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0 <= self.xi <= XI_MAX:
            raise ValueError("xi outside [0, 0.5]")
        for name in ("days", "log_psi", "log_phi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        if not (len(self.days) == len(self.log_psi) == len(self.log_phi)):
            raise ValueError("tracks must have one entry per day")
        if np.any(np.diff(self.days) <= 0):
            raise ValueError("days must be strictly increasing")

    @classmethod
    def from_fits(cls, gamma: GammaFit, gp: GPFit) -> "MarginalModel":
        if not np.array_equal(gamma.track.days, gp.track.days):
            raise ValueError("gamma and GP tracks cover different days")
        return cls(
            gamma.track.days, gamma.track.values, gamma.kappa, gp.track.values, gp.xi,
            p_u=gamma.alpha, beta=gp.beta, log_psi_sd=gamma.track.sd, log_phi_sd=gp.track.sd,
            kappa_sd=gamma.kappa * gamma.log_kappa_sd, xi_sd=gp.xi_sd,
        )

    def _idx(self, days):
        days = np.asarray(days)
        idx = np.clip(np.searchsorted(self.days, days), 0, len(self.days) - 1)
        if np.any(self.days[idx] != days):
            missing = np.setdiff1d(days, self.days)
            raise KeyError(f"marginal model does not cover days {missing[:5].tolist()}")
        return idx

    def covers(self, days) -> bool:
        return bool(np.all(np.isin(np.asarray(days), self.days)))

    def threshold(self, days):
        """u_t, the p_u-quantile of the gamma component."""
        return np.exp(self.log_psi[self._idx(days)])

    def gamma_params(self, days) -> GammaQuantileParams:
        return GammaQuantileParams(self.kappa, np.exp(self.log_psi[self._idx(days)]), self.p_u)

    def gp_params(self, days) -> GPQuantileParams:
        return GPQuantileParams(self.xi, np.exp(self.log_phi[self._idx(days)]), self.beta)


def marginal_cdf(x, days, model: MarginalModel):
    x, days = np.broadcast_arrays(np.asarray(x, float), np.asarray(days))
    if np.any(x <= 0):
        raise ValueError("marginal cdf is defined for x > 0")
    g = model.gamma_params(days)
    u = g.psi_alpha
    gu = gamma_q_cdf(u, g)
    low = gamma_q_cdf(np.minimum(x, u), g)
    hp = model.gp_params(days)
    high = gu + (1 - gu) * gp_cdf(np.maximum(x - u, 0.0), hp)
    return np.where(x <= u, low, high)


def marginal_quantile(p, days, model: MarginalModel):
    p, days = np.broadcast_arrays(np.asarray(p, float), np.asarray(days))
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    g = model.gamma_params(days)
    u = g.psi_alpha
    gu = gamma_q_cdf(u, g)
    low = special.gammaincinv(model.kappa, np.minimum(p, gu)) / g.rate
    ph = np.clip((p - gu) / (1 - gu), 0.0, np.nextafter(1.0, 0))
    high = u + gp_quantile(ph, model.gp_params(days))
    return np.where(p <= gu, low, high)


def sample_marginal(days, model: MarginalModel, rng: np.random.Generator):
    u = rng.uniform(size=np.shape(days))
    u = np.clip(u, 1e-300, np.nextafter(1.0, 0))
    return marginal_quantile(u, days, model)


# ---------------------------------------------------------------------------
# cube-level fitting


def _thin_sites(cube: PrecipCube, stride: int) -> np.ndarray:
    keep = np.zeros(cube.n_sites, bool)
    keep[cube.geometry.subgrid(stride)] = True
    return keep & cube.site_mask


def fit_gamma_temporal(
    intensity: PrecipCube, p_u: float = 0.95, smoothing: SmoothingPrior | None = SmoothingPrior(),
    stride: int = 2,
) -> GammaFit:
    """Fit log psi_alpha (alpha = p_u) per day from an intensity cube, thinned to a subgrid."""
    keep = _thin_sites(intensity, stride)
    v = intensity.values[:, keep]
    days = np.broadcast_to(intensity.days[:, None], v.shape)
    ok = np.isfinite(v) & (v > 0)
    return fit_gamma_values(v[ok], days[ok], alpha=p_u, smoothing=smoothing)


def exceedances(intensity: PrecipCube, u_by_day: Callable) -> tuple[np.ndarray, np.ndarray]:
    v = np.where(intensity.site_mask[None, :], intensity.values, np.nan)
    u = u_by_day(intensity.days)[:, None]
    with np.errstate(invalid="ignore"):
        hit = np.isfinite(v) & (v > u)
    days = np.broadcast_to(intensity.days[:, None], v.shape)
    return (v - u)[hit], days[hit]


def fit_gp_temporal(
    intensity: PrecipCube, gamma: GammaFit, beta: float = 0.5, xi_prior: PcPriorXi = PcPriorXi(7.0),
    smoothing: SmoothingPrior | None = SmoothingPrior(), stride: int = 1,
) -> GPFit:
    """Fit the GP tail to exceedances of u_t = psi_alpha(t) over all (thinned) sites."""
    u = TemporalTrack(gamma.track.days, np.exp(gamma.track.values), gamma.track.sd)
    thinned = intensity.with_values(intensity.values, site_mask=_thin_sites(intensity, stride))
    y, d = exceedances(thinned, u.at)
    return fit_gp_exceedances(y, d, beta=beta, xi_prior=xi_prior, smoothing=smoothing, days=gamma.track.days)


def fit_marginals(
    intensity: PrecipCube, p_u: float = 0.95, beta: float = 0.5, xi_prior: PcPriorXi = PcPriorXi(7.0),
    smoothing: SmoothingPrior | None = SmoothingPrior(), gamma_stride: int = 2, gp_stride: int = 1,
) -> MarginalModel:
    g = fit_gamma_temporal(intensity, p_u=p_u, smoothing=smoothing, stride=gamma_stride)
    h = fit_gp_temporal(intensity, g, beta=beta, xi_prior=xi_prior, smoothing=smoothing, stride=gp_stride)
    return MarginalModel.from_fits(g, h)


# ---------------------------------------------------------------------------
# standardised QQ diagnostics

QQ_PROBS = np.round(np.arange(0.01, 1.0, 0.01), 2)


@dataclass
class QQTable:
    probs: np.ndarray
    empirical: np.ndarray
    model: np.ndarray
    n: int
    degenerate: bool

    @property
    def relative_gap(self) -> np.ndarray:
        return np.abs(self.empirical - self.model) / np.abs(self.model)

    @property
    def max_relative_gap(self) -> float:
        return float(np.max(self.relative_gap))

    def rows(self):
        return list(zip(self.probs.tolist(), self.empirical.tolist(), self.model.tolist()))


def _qq(z: np.ndarray, ref_quantile: Callable, probs) -> QQTable:
    z = z[np.isfinite(z)]
    probs = np.asarray(probs, float)
    if len(z) == 0:
        return QQTable(probs, np.full(len(probs), np.nan), ref_quantile(probs), 0, True)
    emp = np.quantile(z, probs)
    degenerate = bool(len(z) < 2 or np.ptp(z) == 0)
    return QQTable(probs, emp, ref_quantile(probs), int(len(z)), degenerate)


def standardized_qq(values, days, model: MarginalModel, probs=QQ_PROBS) -> dict[str, QQTable]:
    """QQ tables for both components after dividing by the day-specific scale.

    ``gamma``: all positive values over the gamma scale 1/rate_t against gamma(kappa, 1).
    ``gp``: exceedances of u_t over the GP scale sigma_t against GP(1, xi).
    """
    values = np.asarray(values, float)
    days = np.asarray(days)
    ok = np.isfinite(values) & (values > 0)
    values, days = values[ok], days[ok]
    g = model.gamma_params(days)
    zg = values * g.rate
    tables = {
        "gamma": _qq(zg, lambda p: special.gammaincinv(model.kappa, p), probs),
    }
    u = g.psi_alpha
    hit = values > u
    hp = model.gp_params(days[hit])
    zh = (values[hit] - u[hit]) / hp.scale
    unit = GPQuantileParams(model.xi, 1.0, model.beta)
    tables["gp"] = _qq(zh, lambda p: gp_quantile(p, unit) / unit.scale, probs)
    return tables
