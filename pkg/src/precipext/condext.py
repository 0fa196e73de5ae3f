"""Spatial conditional extremes model with intensity-dependent standardizing functions.

Given Y(s0) = y0 > tau, the Laplace-scale field is modelled as

    Y(s) = alpha(d; y0) y0 + y0^beta(d) Z(s) + eps(s),

with Z a Matérn (nu = 0.5) field constrained to vanish at s0 and eps a nugget.
The location decay alpha(d; y0) = exp(-(d / lambda_a(y0))^kappa_a(y0)) has
range and shape that shrink with the conditioning value:

    lambda_a(y0) = lambda_a0 exp(-(y0 - tau) / Lambda_lambda)
    kappa_a(y0)  = kappa_a0 exp(-((y0 - tau) / Lambda_kappa)^varkappa)

and the scale exponent is beta(d) = beta0 exp(-(d / lambda_b)^kappa_b).

Fitting works on an 11-vector ``theta`` of unconstrained coordinates, see
:data:`THETA_NAMES`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special, stats

from .datastore import GridGeometry, PrecipCube
from .randfield import (
    FieldFactorizationError,
    MaternParams,
    PcPriorMatern,
    build_sampler,
    constrained_covariance,
    constrained_covariance_dlogrho,
    matern_correlation,
)
from .standardize import laplace_quantile

log = logging.getLogger(__name__)

RESIDUAL_NU = 0.5
THETA_NAMES = (
    "log_lambda_a0", "log_Lambda_lambda", "log_kappa_a0", "log_Lambda_kappa", "log_varkappa",
    "logit_beta0", "log_lambda_b", "log_kappa_b", "log_rho", "log_sigma", "log_sigma_eps",
)
A_SLICE = slice(0, 5)
B_SLICE = slice(5, 8)


class CondExtError(RuntimeError):
    pass


@dataclass(frozen=True)
class StandardizingParams:
    lambda_a0: float
    Lambda_lambda: float
    kappa_a0: float
    Lambda_kappa: float
    varkappa: float
    beta0: float
    lambda_b: float
    kappa_b: float

    def __post_init__(self):
        for name in ("lambda_a0", "Lambda_lambda", "kappa_a0", "Lambda_kappa", "varkappa", "lambda_b", "kappa_b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.beta0 < 1:
            raise ValueError(f"beta0 must lie in [0, 1), got {self.beta0}")


@dataclass(frozen=True)
class CondExtremesModel:
    params: StandardizingParams
    residual: MaternParams
    sigma_eps: float
    tau: float
    s0: int

    def __post_init__(self):
        if self.residual.nu != RESIDUAL_NU:
            raise ValueError("residual smoothness is fixed at nu = 0.5")
        if not self.sigma_eps >= 0:
            raise ValueError("nugget sd must be nonnegative")

    @property
    def theta(self) -> np.ndarray:
        p = self.params
        return np.array([
            np.log(p.lambda_a0), np.log(p.Lambda_lambda), np.log(p.kappa_a0), np.log(p.Lambda_kappa),
            np.log(p.varkappa), special.logit(p.beta0), np.log(p.lambda_b), np.log(p.kappa_b),
            np.log(self.residual.rho), np.log(self.residual.sigma), np.log(self.sigma_eps),
        ])

    @classmethod
    def from_theta(cls, theta, tau: float, s0: int) -> "CondExtremesModel":
        t = np.asarray(theta, float)
        e = np.exp(t)
        params = StandardizingParams(e[0], e[1], e[2], e[3], e[4], float(special.expit(t[5])), e[6], e[7])
        return cls(params, MaternParams(RESIDUAL_NU, e[8], e[9]), float(e[10]), float(tau), int(s0))


# ---------------------------------------------------------------------------
# standardizing functions


def lambda_a(y0, params: StandardizingParams, tau: float):
    return params.lambda_a0 * np.exp(-(np.asarray(y0, float) - tau) / params.Lambda_lambda)


def kappa_a(y0, params: StandardizingParams, tau: float):
    u = np.maximum(np.asarray(y0, float) - tau, 0.0)
    return params.kappa_a0 * np.exp(-((u / params.Lambda_kappa) ** params.varkappa))


def alpha_fn(d, y0, params: StandardizingParams, tau: float):
    """Location decay in (0, 1]; equals 1 at d = 0."""
    d = np.asarray(d, float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    lam = lambda_a(y0, params, tau)
    kap = kappa_a(y0, params, tau)
    return np.exp(-((d / lam) ** kap))


def beta_fn(d, params: StandardizingParams):
    d = np.asarray(d, float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    return params.beta0 * np.exp(-((d / params.lambda_b) ** params.kappa_b))


def residual_variance(d, residual: MaternParams):
    """Variance of the s0-constrained residual at distance d: sigma^2 (1 - gamma(d)^2)."""
    g = matern_correlation(d, residual)
    return residual.sigma**2 * (1 - g**2)


def conditional_moments(d, y0, model: CondExtremesModel):
    """Mean alpha(d; y0) y0 and sd sqrt(sigma(d)^2 y0^(2 beta(d)) + sigma_eps^2); (y0, 0) at d = 0."""
    d = np.asarray(d, float)
    y0 = np.asarray(y0, float)
    mean = alpha_fn(d, y0, model.params, model.tau) * y0
    var = residual_variance(d, model.residual) * y0 ** (2 * beta_fn(d, model.params)) + model.sigma_eps**2
    sd = np.where(d == 0, 0.0, np.sqrt(var))
    return mean, sd


def _alpha_grad(d, u, ta):
    """alpha on the (u, d) grid and its derivatives with respect to the five a-coordinates.

    ``d`` is (m,), ``u = y0 - tau`` is (n,); returns (n, m) and (n, m, 5).
    """
    lam0, Llam, kap0, Lkap, vk = np.exp(ta)
    u = np.asarray(u, float)[:, None]
    d = np.asarray(d, float)[None, :]
    loglam = np.log(lam0) - u / Llam
    with np.errstate(divide="ignore", invalid="ignore"):
        logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0) / Lkap), 0.0)
    w = np.where(u > 0, np.exp(vk * logu), 0.0)
    kap = kap0 * np.exp(-w)
    pos = d > 0
    with np.errstate(divide="ignore"):
        logd = np.where(pos, np.log(np.where(pos, d, 1.0)), 0.0)
    logratio = logd - loglam
    q = np.where(pos, np.exp(kap * logratio), 0.0)
    alpha = np.exp(-q)
    dlogq = np.empty(np.broadcast_shapes(alpha.shape) + (5,))
    # d log q = d kappa * logratio - kappa * d log lambda
    dlogq[..., 0] = -kap
    dlogq[..., 1] = -kap * (u / Llam)
    dlogq[..., 2] = kap * logratio
    dlogq[..., 3] = kap * vk * w * logratio
    dlogq[..., 4] = -kap * w * vk * logu * logratio
    grad = (-alpha * q)[..., None] * dlogq
    return alpha, grad


def _beta_grad(d, tb):
    """beta(d) and its derivatives with respect to (logit beta0, log lambda_b, log kappa_b)."""
    beta0 = special.expit(tb[0])
    lamb, kapb = np.exp(tb[1]), np.exp(tb[2])
    d = np.asarray(d, float)
    pos = d > 0
    with np.errstate(divide="ignore"):
        lr = np.where(pos, np.log(np.where(pos, d, 1.0) / lamb), 0.0)
    p = np.where(pos, np.exp(kapb * lr), 0.0)
    beta = beta0 * np.exp(-p)
    grad = np.stack([beta * (1 - beta0), beta * kapb * p, -beta * p * lr * kapb], axis=-1)
    return beta, grad


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True, eq=False)
class ExceedanceEvents:
    """Times at which Y(s0) > tau, with the Laplace-scale field at each.

    ``cube`` is the Laplace cube restricted to event times; dry cells (-inf) and
    masked cells (NaN) both count as unobserved for the intensity model.
    """

    cube: PrecipCube
    s0: int
    tau: float

    @property
    def n_events(self) -> int:
        return self.cube.n_times

    @property
    def y0(self) -> np.ndarray:
        return self.cube.values[:, self.s0]

    @property
    def geometry(self) -> GridGeometry:
        return self.cube.geometry

    def fields(self) -> np.ndarray:
        """(n_events, n_sites) Laplace values with every unobserved entry as NaN."""
        v = np.array(self.cube.values)
        v[~np.isfinite(v)] = np.nan
        return v

    def distances(self) -> np.ndarray:
        return self.geometry.distances_from(self.s0)

    def subset(self, keep) -> "ExceedanceEvents":
        return replace(self, cube=self.cube.select_times(keep))


def extract_events(laplace: PrecipCube, s0: int, tau: float) -> ExceedanceEvents:
    if laplace.kind != "laplace":
        raise ValueError("events are extracted from a Laplace-scale cube")
    if not laplace.site_mask[s0]:
        raise ValueError(f"conditioning site {s0} is masked")
    y0 = laplace.values[:, s0]
    with np.errstate(invalid="ignore"):
        hit = y0 > tau
    if not hit.any():
        raise CondExtError(f"no exceedances of tau={tau:.4g} at site {s0}; lower p_tau")
    return ExceedanceEvents(laplace.select_times(hit), int(s0), float(tau))


# ---------------------------------------------------------------------------
# least-squares prefit of the location function


@dataclass
class PrefitResult:
    theta_a: np.ndarray
    windows: list = field(default_factory=list)  # (mean y0, lambda, kappa, n_obs)

    @property
    def params(self) -> dict:
        e = np.exp(self.theta_a)
        return dict(zip(("lambda_a0", "Lambda_lambda", "kappa_a0", "Lambda_kappa", "varkappa"), e.tolist()))


_A_BOUNDS = (
    np.log([0.05, 0.05, 0.02, 0.02, 0.05]),
    np.log([1e4, 1e4, 20.0, 1e3, 20.0]),
)


def _fit_window(d, y0, x):
    def resid(p):
        lam, kap = np.exp(p)
        return x - np.exp(-((d / lam) ** kap)) * y0

    start = np.array([np.log(max(np.median(d), 1.0)), 0.0])
    res = optimize.least_squares(resid, start, bounds=(np.log([0.05, 0.02]), np.log([1e4, 20.0])), x_scale=1.0)
    return np.exp(res.x)


def least_squares_prefit(
    events: ExceedanceEvents, window: float = 0.2, min_obs: int = 30, min_events: int = 20
) -> PrefitResult:
    """Two-stage least-squares estimate of the five location-function parameters.

    Stage one fits (lambda, kappa) in windows of y0; stage two fits the parametric
    y0-curves to those points and then refines all five parameters jointly on the
    raw field values.
    """
    if events.n_events < min_events:
        raise CondExtError(f"prefit needs at least {min_events} events, got {events.n_events}")
    tau = events.tau
    y0 = events.y0
    X = events.fields()
    d = events.distances()
    off = np.flatnonzero((d > 0) & events.cube.site_mask)
    X, d = X[:, off], d[off]
    edges = tau + window * np.arange(int(np.ceil((y0.max() - tau) / window)) + 1)
    which = np.clip(np.searchsorted(edges, y0, side="right") - 1, 0, len(edges) - 1)

    windows = []
    for k in np.unique(which):
        sel = which == k
        obs = np.isfinite(X[sel])
        if obs.sum() < min_obs:
            continue
        dd = np.broadcast_to(d, obs.shape)[obs]
        yy = np.broadcast_to(y0[sel][:, None], obs.shape)[obs]
        lam, kap = _fit_window(dd, yy, X[sel][obs])
        windows.append((float(y0[sel].mean()), float(lam), float(kap), int(obs.sum())))
    if len(windows) == 0:
        raise CondExtError("every y0 window had too few observations for the prefit")
    W = np.array(windows)
    u, loglam, logkap, wts = W[:, 0] - tau, np.log(W[:, 1]), np.log(W[:, 2]), W[:, 3]

    # lambda curve: weighted linear regression of log lambda on u
    if len(W) >= 2 and np.ptp(u) > 0:
        slope, icpt = np.polyfit(u, loglam, 1, w=np.sqrt(wts))
    else:
        slope, icpt = 0.0, loglam[0]
    Llam = -1.0 / slope if slope < -1e-3 else 1e3
    start = [icpt, np.log(Llam)]

    # kappa curve
    def kres(p):
        k0, Lk, vk = np.exp(p)
        return np.sqrt(wts) * (logkap - (np.log(k0) - (u / Lk) ** vk))

    if len(W) >= 3:
        k = optimize.least_squares(
            kres, [logkap.max(), np.log(max(np.median(u), 0.2)), 0.0],
            bounds=(_A_BOUNDS[0][2:], _A_BOUNDS[1][2:]),
        ).x
    else:
        k = np.array([np.mean(logkap), np.log(1e2), 0.0])
    theta_a = np.clip(np.array([start[0], start[1], *k]), _A_BOUNDS[0] + 1e-9, _A_BOUNDS[1] - 1e-9)

    # stage 2b: joint refinement on the raw values
    obs = np.isfinite(X)
    xs = X[obs]
    ev_idx = np.broadcast_to(np.arange(len(y0))[:, None], obs.shape)[obs]
    site_idx = np.broadcast_to(np.arange(len(d))[None, :], obs.shape)[obs]
    uu = y0 - tau

    def resid(ta):
        a, _ = _alpha_grad(d, uu, ta)
        return (a * y0[:, None])[obs] - xs

    def jac(ta):
        _, g = _alpha_grad(d, uu, ta)
        return (g * y0[:, None, None])[ev_idx, site_idx]

    res = optimize.least_squares(resid, theta_a, jac=jac, bounds=_A_BOUNDS, x_scale=1.0, max_nfev=500)
    return PrefitResult(res.x, windows)


# ---------------------------------------------------------------------------
# penalised likelihood


@dataclass(frozen=True)
class CondExtPriors:
    a_means: tuple = (np.log(10.0), np.log(4.0), 0.0, np.log(3.0), 0.0)
    a_sd: float = 5.0
    b_means: tuple = (float(special.logit(0.65)), np.log(8.5), np.log(0.5))
    b_sd: float = 5.0
    residual_pc: PcPriorMatern = PcPriorMatern(60.0, 0.05, 4.0, 0.05, dim=2)
    nugget_mean: float = np.log(0.1)
    nugget_sd: float = 5.0

    def with_a_means(self, theta_a) -> "CondExtPriors":
        return replace(self, a_means=tuple(float(v) for v in theta_a))

    def log_density(self, theta) -> tuple[float, np.ndarray]:
        t = np.asarray(theta, float)
        g = np.zeros(11)
        ra = (t[A_SLICE] - np.asarray(self.a_means)) / self.a_sd
        rb = (t[B_SLICE] - np.asarray(self.b_means)) / self.b_sd
        rn = (t[10] - self.nugget_mean) / self.nugget_sd
        lp = -0.5 * (ra @ ra + rb @ rb + rn * rn)
        g[A_SLICE] = -ra / self.a_sd
        g[B_SLICE] = -rb / self.b_sd
        g[10] = -rn / self.nugget_sd
        lp += float(self.residual_pc.log_density_log_scale(t[8], t[9]))
        g[8], g[9] = self.residual_pc.grad_log_scale(t[8], t[9])
        return lp, g


def likelihood_sites(geometry: GridGeometry, s0: int, stride: int = 1) -> np.ndarray:
    """Sites on the stride lattice through s0 (s0 itself included)."""
    r0, c0 = geometry.rowcol(s0)
    rows, cols = np.divmod(np.arange(geometry.n_sites), geometry.nx)
    return np.flatnonzero(((rows - r0) % stride == 0) & ((cols - c0) % stride == 0))


class CondExtObjective:
    """Negative log-posterior of theta with analytic gradient.

    Sites are thinned to the stride lattice through s0; s0 itself is excluded
    from the Gaussian vector since its value is conditioned on.
    """

    def __init__(self, events: ExceedanceEvents, priors: CondExtPriors = CondExtPriors(), stride: int = 1,
                 chunk: int = 128):
        g = events.geometry
        sites = likelihood_sites(g, events.s0, stride)
        sites = sites[(sites != events.s0) & events.cube.site_mask[sites]]
        if len(sites) == 0:
            raise CondExtError("no usable sites besides s0")
        self.events = events
        self.priors = priors
        self.sites = sites
        coords = g.coords[sites]
        self.dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
        self.d0 = g.distances_from(events.s0)[sites]
        self.y0 = events.y0
        self.u = self.y0 - events.tau
        self.logy0 = np.log(self.y0)
        X = events.fields()[:, sites]
        obs = np.isfinite(X)
        self.X = np.where(obs, X, 0.0)
        self.obs = obs
        self.complete = np.flatnonzero(obs.all(axis=1))
        self.partial = np.flatnonzero(~obs.all(axis=1) & obs.any(axis=1))
        self.n_obs = int(obs.sum())
        self.chunk = chunk
        self.last_failed = False

    def model(self, theta) -> CondExtremesModel:
        return CondExtremesModel.from_theta(theta, self.events.tau, self.events.s0)

    def neg_log_likelihood(self, theta, grad: bool = True, events=None):
        t = np.asarray(theta, float)
        rho, sig, s_eps = np.exp(t[8:11])
        mp = MaternParams(RESIDUAL_NU, rho, sig)
        C = constrained_covariance(self.dist, self.d0, mp)
        dC_rho = constrained_covariance_dlogrho(self.dist, self.d0, mp) if grad else None
        alpha, dalpha = _alpha_grad(self.d0, self.u, t[A_SLICE])
        beta, dbeta = _beta_grad(self.d0, t[B_SLICE])
        m = len(self.sites)
        nll = 0.0
        g = np.zeros(11)
        A = np.zeros((m, m))
        s2 = s_eps**2
        eye = np.eye(m)

        def accumulate(idx_e, sel):
            nonlocal nll
            y0 = self.y0[idx_e]
            r = self.X[np.ix_(idx_e, sel)] - alpha[np.ix_(idx_e, sel)] * y0[:, None]
            b = np.exp(self.logy0[idx_e][:, None] * beta[sel][None, :])
            Cs = C[np.ix_(sel, sel)]
            S = b[:, :, None] * Cs[None] * b[:, None, :] + s2 * eye[: len(sel), : len(sel)]
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise FieldFactorizationError("event covariance not positive definite")
            logdet = 2 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
            K = np.linalg.inv(S)
            K = 0.5 * (K + np.swapaxes(K, 1, 2))
            v = np.einsum("eij,ej->ei", K, r)
            nll += 0.5 * (logdet.sum() + np.einsum("ei,ei->", r, v) + r.size * np.log(2 * np.pi))
            if not grad:
                return
            W = K - v[:, :, None] * v[:, None, :]
            # location parameters: dNLL = -v . da
            da = dalpha[np.ix_(idx_e, sel)] * y0[:, None, None]
            g[A_SLICE] -= np.einsum("ei,eik->k", v, da)
            # scale exponent: g_b = (W o C) b, db = b log y0 dbeta
            gb = np.einsum("eij,ij,ej->ei", W, Cs, b)
            db = (b * self.logy0[idx_e][:, None])[:, :, None] * dbeta[sel][None, :, :]
            g[B_SLICE] += np.einsum("ei,eik->k", gb, db)
            Ae = np.einsum("ei,eij,ej->ij", b, W, b)
            if len(sel) == m:
                A[:] += Ae
            else:
                A[np.ix_(sel, sel)] += Ae
            g[10] += s2 * np.trace(W, axis1=1, axis2=2).sum()

        events = np.arange(len(self.y0)) if events is None else np.asarray(events)
        comp = np.intersect1d(self.complete, events)
        part = np.intersect1d(self.partial, events)
        self.last_failed = False
        try:
            full = np.arange(m)
            for i in range(0, len(comp), self.chunk):
                accumulate(comp[i: i + self.chunk], full)
            for e in part:
                accumulate(np.array([e]), np.flatnonzero(self.obs[e]))
        except FieldFactorizationError:
            self.last_failed = True
            return (np.inf, np.zeros(11)) if grad else np.inf
        if not grad:
            return nll
        g[8] = 0.5 * np.sum(A * dC_rho)
        g[9] = np.sum(A * C)  # 0.5 * sum(A o 2C)
        return nll, g

    def __call__(self, theta):
        nll, g = self.neg_log_likelihood(theta)
        lp, glp = self.priors.log_density(theta)
        return nll - lp, g - glp

    def value(self, theta) -> float:
        nll = self.neg_log_likelihood(theta, grad=False)
        return nll - self.priors.log_density(theta)[0]


def neg_log_posterior(theta, events: ExceedanceEvents, priors: CondExtPriors = CondExtPriors(), stride: int = 1):
    return CondExtObjective(events, priors, stride).value(theta)


# ---------------------------------------------------------------------------
# MAP fitting


@dataclass
class CondExtFit:
    model: CondExtremesModel
    theta: np.ndarray
    hessian: np.ndarray
    covariance: np.ndarray
    objective: float
    converged: bool
    grad_norm: float
    hessian_regularized: bool
    modes: list = field(default_factory=list)  # (theta, objective, converged) per start
    prefit: PrefitResult | None = None

    def sample_theta(self, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.theta, self.covariance, method="cholesky")


def _fd_hessian(fun, theta, h=1e-4):
    n = len(theta)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (fun(theta + e)[1] - fun(theta - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def _regularized_cov(H):
    try:
        np.linalg.cholesky(H)
        return np.linalg.inv(H), False
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(H)
        floor = max(1e-6, 1e-6 * np.abs(w).max())
        log.warning("Hessian at the mode is not positive definite (min eigenvalue %.3e); regularizing", w.min())
        w = np.maximum(np.abs(w), floor)
        return (V / w) @ V.T, True


def default_theta(prefit: PrefitResult, events: ExceedanceEvents) -> np.ndarray:
    """Starting point: prefit location parameters and prior-mean scale parameters."""
    X = events.fields()
    d = events.distances()
    far = d > np.quantile(d, 0.75)
    sd = np.nanstd(X[:, far]) if np.isfinite(X[:, far]).sum() > 2 else 1.0
    diam = float(d.max())
    return np.concatenate([
        prefit.theta_a,
        [special.logit(0.65), np.log(8.5), np.log(0.5)],
        [np.log(max(diam / 3, 1.0)), np.log(max(sd, 0.1) / np.exp(0.3 * np.mean(np.log(events.y0)))),
         np.log(0.1 * max(sd, 0.1))],
    ])


def fit_map(
    events: ExceedanceEvents, prefit: PrefitResult | None = None, priors: CondExtPriors | None = None,
    stride: int = 2, n_starts: int = 3, jitter: float = 0.1, seed: int = 0, init=None, maxiter: int = 2000,
) -> CondExtFit:
    """Penalised MAP fit by L-BFGS from ``n_starts`` jittered starts; curvature by differencing the gradient."""
    if prefit is None:
        prefit = least_squares_prefit(events)
    if priors is None:
        priors = CondExtPriors().with_a_means(prefit.theta_a)
    obj = CondExtObjective(events, priors, stride=stride)
    theta0 = default_theta(prefit, events) if init is None else np.asarray(init, float)
    rng = np.random.default_rng(seed)
    starts = [theta0] + [theta0 + jitter * rng.standard_normal(11) for _ in range(n_starts - 1)]
    f0 = abs(obj(theta0)[0])
    scale = 1.0 / max(1.0, f0)

    def scaled(t):
        f, g = obj(t)
        return f * scale, g * scale

    modes = []
    for k, s in enumerate(starts):
        res = optimize.minimize(
            scaled, s, jac=True, method="L-BFGS-B",
            options={"maxiter": maxiter, "ftol": 1e-13, "gtol": 1e-7, "maxcor": 20},
        )
        modes.append((res.x, res.fun / scale, bool(res.success)))
        log.info("start %d: objective %.6f, converged=%s", k, res.fun / scale, res.success)
    best = min(modes, key=lambda m: m[1])
    agree = sum(np.max(np.abs(m[0] - best[0])) < 1e-3 for m in modes)
    if agree < len(modes):
        log.warning("multistart found %d distinct modes", len(modes) - agree + 1)
    theta = best[0]
    f, g = obj(theta)
    if not np.isfinite(f):
        raise CondExtError("objective is not finite at the reported mode")
    H = _fd_hessian(obj, theta)
    cov, reg = _regularized_cov(H)
    return CondExtFit(
        obj.model(theta), theta, H, cov, float(f), best[2], float(np.linalg.norm(g)), reg, modes, prefit,
    )


# ---------------------------------------------------------------------------
# simulation and model-implied chi


def simulate_conditional_field(
    model: CondExtremesModel, y0: float, geometry: GridGeometry, rng: np.random.Generator, sampler=None,
) -> np.ndarray:
    """One Laplace-scale field with Y(s0) = y0 exactly."""
    if not y0 > model.tau:
        raise ValueError(f"y0={y0} must exceed tau={model.tau}")
    if sampler is None:
        sampler = build_sampler(geometry, model.residual, constraint=model.s0)
    d = geometry.distances_from(model.s0)
    a = alpha_fn(d, y0, model.params, model.tau) * y0
    b = y0 ** beta_fn(d, model.params)
    z = sampler.sample(rng)
    eps = model.sigma_eps * rng.standard_normal(geometry.n_sites)
    out = a + b * z + eps
    out[model.s0] = y0
    return out


def model_chi(model: CondExtremesModel, p: float, d, n_mc: int = 10_000, rng: np.random.Generator | None = None):
    """Model-implied P(Y(s) > q | Y(s0) > q), q the Laplace p-quantile.

    y0 is drawn from the Laplace law above q; the Gaussian exceedance given y0 is
    evaluated in closed form.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if n_mc < 10_000:
        raise ValueError("n_mc must be at least 10^4")
    rng = np.random.default_rng(0) if rng is None else rng
    q = float(laplace_quantile(p))
    y0 = laplace_quantile(p + (1 - p) * rng.uniform(size=n_mc))
    y0 = np.maximum(y0, q)
    d = np.atleast_1d(np.asarray(d, float))
    mean, sd = conditional_moments(d[None, :], y0[:, None], model)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (q - mean) / sd
    tail = np.where(sd > 0, stats.norm.sf(z), (mean > q).astype(float))
    return tail.mean(axis=0)
