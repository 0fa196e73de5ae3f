"""Matérn Gaussian random fields on a grid, with an optional exact zero constraint at one site.

The constraint Z(s0) = 0 is imposed by Gaussian conditioning: the sampler targets
the law with covariance C - C[:, s0] C[s0, :] / C[s0, s0].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, kve

from .datastore import GridGeometry

JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


class FieldFactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class MaternParams:
    nu: float
    rho: float
    sigma: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be > 0, got {self.nu}")
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def kappa(self) -> float:
        return np.sqrt(8.0 * self.nu) / self.rho


# scipy's kve turns NaN near 1e9; the correlation has underflowed to 0 long before
_KVE_MAX = 1e8


def _matern_scaled(x: np.ndarray, nu: float) -> np.ndarray:
    # 2^(1-nu)/Gamma(nu) x^nu K_nu(x), evaluated in log space via the scaled Bessel function.
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    with np.errstate(divide="ignore", under="ignore"):
        logv = (
            (1.0 - nu) * np.log(2.0) - gammaln(nu) + nu * np.log(xp)
            + np.log(kve(nu, np.minimum(xp, _KVE_MAX))) - xp
        )
    out[pos] = np.exp(logv)
    return out


def matern_correlation(d, params: MaternParams):
    """Matérn correlation at distance(s) ``d`` (km); equals 1 at d = 0."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be >= 0")
    out = _matern_scaled(np.atleast_1d(params.kappa * d), params.nu)
    return out.reshape(d.shape) if d.ndim else float(out[0])


def matern_correlation_dlogrho(d, params: MaternParams) -> np.ndarray:
    """Derivative of the correlation with respect to log(rho)."""
    d = np.asarray(d, dtype=np.float64)
    x = params.kappa * d
    out = np.zeros_like(x)
    pos = x > 0
    xp = x[pos]
    nu = params.nu
    # d/dx [x^nu K_nu(x)] = -x^nu K_{nu-1}(x) and dlog(x)/dlog(rho) = -1
    with np.errstate(divide="ignore", under="ignore"):
        logv = (
            (1.0 - nu) * np.log(2.0) - gammaln(nu) + (nu + 1.0) * np.log(xp)
            + np.log(kve(nu - 1.0, np.minimum(xp, _KVE_MAX))) - xp
        )
    out[pos] = np.exp(logv)
    return out


def constrained_covariance(dist: np.ndarray, dist0: np.ndarray, params: MaternParams) -> np.ndarray:
    """Covariance of Z | Z(s0) = 0 among sites with pairwise distances ``dist``.

    ``dist0`` holds each site's distance to s0.  The returned matrix is symmetric bitwise.
    """
    r = matern_correlation(dist, params)
    r0 = matern_correlation(dist0, params)
    c = params.sigma**2 * (r - np.outer(r0, r0))
    return 0.5 * (c + c.T)


def constrained_covariance_dlogrho(dist, dist0, params: MaternParams) -> np.ndarray:
    r0 = matern_correlation(dist0, params)
    dr = matern_correlation_dlogrho(dist, params)
    dr0 = matern_correlation_dlogrho(dist0, params)
    g = params.sigma**2 * (dr - np.outer(dr0, r0) - np.outer(r0, dr0))
    return 0.5 * (g + g.T)


def jittered_cholesky(cov: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Lower Cholesky factor with diagonal jitter escalating from 1e-12 to 1e-8 (times ``scale``)."""
    eye = np.eye(len(cov))
    for jit in JITTERS:
        try:
            return np.linalg.cholesky(cov + jit * scale * eye)
        except np.linalg.LinAlgError:
            continue
    lam = float(np.linalg.eigvalsh(cov)[0]) if len(cov) else 0.0
    raise FieldFactorizationError(
        f"covariance not positive definite after jitter {JITTERS[-1]:g}; smallest eigenvalue ~ {lam:.3e}"
    )


@dataclass(frozen=True, eq=False)
class ConstrainedFieldSampler:
    """Exact dense sampler for a (possibly constrained) Matérn field on grid sites.

    ``cov`` is the full (n_sites, n_sites) target covariance; when ``s0`` is set its
    row and column are identically zero and draws are exactly 0 there.
    """

    geometry: GridGeometry
    params: MaternParams
    s0: int | None
    cov: np.ndarray
    free: np.ndarray
    chol: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.geometry.n_sites

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        m = 1 if size is None else int(size)
        out = np.zeros((m, self.n_sites))
        if len(self.free):
            eps = rng.standard_normal((m, len(self.free)))
            out[:, self.free] = eps @ self.chol.T
        return out[0] if size is None else out


def build_sampler(
    geometry: GridGeometry, params: MaternParams, constraint: int | None = None
) -> ConstrainedFieldSampler:
    dist = geometry.distance_matrix()
    cov = params.sigma**2 * matern_correlation(dist, params)
    if constraint is not None:
        s0 = int(constraint)
        c0 = cov[:, s0].copy()
        cov = cov - np.outer(c0, c0) / cov[s0, s0] if params.sigma > 0 else cov
        cov = 0.5 * (cov + cov.T)
        cov[s0, :] = 0.0
        cov[:, s0] = 0.0
        free = np.setdiff1d(np.arange(geometry.n_sites), [s0])
    else:
        s0 = None
        free = np.arange(geometry.n_sites)
    cov.setflags(write=False)
    if params.sigma == 0:
        chol = np.zeros((len(free), len(free)))
    else:
        chol = jittered_cholesky(cov[np.ix_(free, free)], params.sigma**2)
    return ConstrainedFieldSampler(geometry, params, s0, cov, free, chol)


def sample_scaled_field(sampler: ConstrainedFieldSampler, scale, rng: np.random.Generator, size=None):
    """One draw (or ``size`` draws) of b(s) Z(s) with per-site nonnegative ``scale``."""
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (sampler.n_sites,))
    if np.any(scale < 0) or not np.all(np.isfinite(scale)):
        raise ValueError("scale must be finite and nonnegative")
    return scale * sampler.sample(rng, size)


@dataclass(frozen=True)
class PcPriorMatern:
    """Penalised-complexity prior on (range, sd) of a Matérn field in ``dim`` dimensions.

    Calibrated by P(range > range0) = range_exceed_prob and P(sd > sd0) = sd_exceed_prob.
    """

    range0: float
    range_exceed_prob: float
    sd0: float
    sd_exceed_prob: float
    dim: int = 2

    @property
    def lam_range(self) -> float:
        return -np.log1p(-self.range_exceed_prob) * self.range0 ** (self.dim / 2)

    @property
    def lam_sd(self) -> float:
        return -np.log(self.sd_exceed_prob) / self.sd0

    def log_density_log_scale(self, log_rho, log_sd):
        """Joint log density of (log range, log sd), Jacobians included."""
        h = self.dim / 2
        lr, ls = self.lam_range, self.lam_sd
        return (
            np.log(h) + np.log(lr) - h * log_rho - lr * np.exp(-h * log_rho)
            + np.log(ls) + log_sd - ls * np.exp(log_sd)
        )

    def grad_log_scale(self, log_rho, log_sd) -> tuple[float, float]:
        h = self.dim / 2
        return (
            -h + self.lam_range * h * np.exp(-h * log_rho),
            1.0 - self.lam_sd * np.exp(log_sd),
        )

    def range_cdf(self, rho):
        return np.exp(-self.lam_range * np.asarray(rho, float) ** (-self.dim / 2))
