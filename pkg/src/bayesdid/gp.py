"""Gaussian process engine for the control-arm conditional mean.

Squared-exponential ARD kernel

    K(x, x') = nu**2 * exp(-sum_l a_l**2 (x_l - x'_l)**2 / 2),

an optional rank-one Riesz adjustment ``K_c = K + varsigma**2 g g'`` with
``g = gamma_hat(0, .)``, type-II maximum likelihood for
``(mu, nu, a_1..a_p, sigma)`` and the closed-form joint Gaussian posterior of
the conditional mean at every covariate row.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy.linalg.lapack import dpotri
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConditioningError, DegenerateAdjustmentError

__all__ = [
    "GPHyperParams",
    "AdjustedKernelConfig",
    "GaussianPosterior",
    "se_kernel",
    "se_gram",
    "adjusted_kernel",
    "adjusted_gram",
    "varsigma_rule",
    "jitter_cholesky",
    "log_marginal_likelihood",
    "optimize_hyperparameters",
    "gp_posterior",
    "sample_posterior",
    "GPMeanRegressor",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-4

_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class GPHyperParams:
    """Prior mean ``mu``, amplitude ``nu``, ARD rates ``a_l`` and noise sd ``sigma``."""

    mu: float
    nu: float
    lengthscale_rates: np.ndarray
    sigma: float

    def __post_init__(self):
        rates = np.array(self.lengthscale_rates, dtype=float, ndmin=1).ravel()
        rates.setflags(write=False)
        object.__setattr__(self, "lengthscale_rates", rates)
        vals = [self.mu, self.nu, self.sigma, *rates]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("hyperparameters must be finite")
        if self.nu <= 0 or self.sigma <= 0 or np.any(rates <= 0):
            raise ValueError("nu, sigma and lengthscale rates must be positive")

    @property
    def p(self):
        return self.lengthscale_rates.shape[0]

    def to_vector(self):
        """``[mu, log nu, log a_1..a_p, log sigma]`` (the optimiser's space)."""
        return np.concatenate(
            [[self.mu, math.log(self.nu)], np.log(self.lengthscale_rates), [math.log(self.sigma)]]
        )

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(
            mu=float(theta[0]),
            nu=float(np.exp(theta[1])),
            lengthscale_rates=np.exp(theta[2:-1]),
            sigma=float(np.exp(theta[-1])),
        )


@dataclass(frozen=True)
class AdjustedKernelConfig:
    """Prior adjustment: sd ``varsigma`` along ``gamma_control = gamma_hat(0, X_i)``.

    ``gamma_control`` is aligned with the rows of the covariate matrix it is
    used with.
    """

    varsigma: float
    gamma_control: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma_control, dtype=float).ravel()
        g.setflags(write=False)
        object.__setattr__(self, "gamma_control", g)
        if not math.isfinite(self.varsigma) or self.varsigma < 0:
            raise ValueError(f"varsigma must be finite and >= 0, got {self.varsigma}")
        if not np.all(np.isfinite(g)):
            raise ValueError("gamma_control must be finite")


@dataclass(frozen=True)
class GaussianPosterior:
    """Joint Gaussian law of the conditional mean at ``n`` points.

    ``chol @ chol.T == cov + jitter * I``.
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0

    @property
    def n(self):
        return self.mean.shape[0]


# --------------------------------------------------------------------------
# Kernels


def se_kernel(x, xp, h):
    """Squared-exponential ARD covariance between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape or x.shape[0] != h.p:
        raise ValueError(f"dimension mismatch: {x.shape}, {xp.shape}, p={h.p}")
    r2 = np.sum((h.lengthscale_rates * (x - xp)) ** 2)
    return h.nu**2 * math.exp(-0.5 * r2)


def se_gram(xa, xb, h):
    """Gram matrix ``K(xa_i, xb_j)``."""
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if xa.shape[1] != h.p or xb.shape[1] != h.p:
        raise ValueError(f"dimension mismatch: {xa.shape[1]}, {xb.shape[1]}, p={h.p}")
    if h.p == 0:
        return np.full((xa.shape[0], xb.shape[0]), h.nu**2)
    a = h.lengthscale_rates
    r2 = cdist(xa * a, xb * a, "sqeuclidean")
    return h.nu**2 * np.exp(-0.5 * r2)


def adjusted_kernel(i, j, base, cfg):
    """``K_c`` entry for rows ``i, j`` given ``base = K(x_i, x_j)``."""
    g = cfg.gamma_control
    return base + cfg.varsigma**2 * g[i] * g[j]


def adjusted_gram(base, gamma_a, gamma_b, varsigma):
    """Add ``varsigma**2 gamma_a gamma_b'`` to a Gram matrix (no-op at zero)."""
    if varsigma == 0:
        return base
    return base + varsigma**2 * np.outer(gamma_a, gamma_b)


def varsigma_rule(nu, gamma_control, d, c_varsigma=1.0):
    """Prior-adjustment sd ``c * nu log(n_c) / (sqrt(n_c) Gamma_n)``.

    ``Gamma_n`` is the mean absolute Riesz value over control units;
    ``gamma_control`` and ``d`` are aligned with the full sample.
    """
    gamma_control = np.asarray(gamma_control, dtype=float).ravel()
    d = np.asarray(d).ravel()
    ctrl = d == 0
    n_c = int(ctrl.sum())
    if n_c < 1:
        raise ValueError("varsigma_rule needs at least one control unit")
    big_gamma = np.abs(gamma_control[ctrl]).sum() / n_c
    if big_gamma == 0:
        raise DegenerateAdjustmentError("gamma_hat(0, X_i) vanishes on every control unit")
    return c_varsigma * nu * math.log(n_c) / (math.sqrt(n_c) * big_gamma)


# --------------------------------------------------------------------------
# Linear algebra


def jitter_cholesky(a, start=JITTER_START, max_jitter=JITTER_MAX):
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Tries the matrix as is, then adds ``start * mean(diag)`` and multiplies
    by 10 until ``max_jitter * mean(diag)``.

    Returns
    -------
    (L, jitter) where ``L @ L.T == a + jitter * I``.
    """
    a = np.asarray(a, dtype=float)
    try:
        return la.cholesky(a, lower=True, check_finite=False), 0.0
    except la.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if not np.all(np.isfinite(a)):
        raise ConditioningError("matrix has non-finite entries")
    if scale <= 0:
        if not np.any(a):
            return np.zeros_like(a), 0.0
        raise ConditioningError("matrix has non-positive mean diagonal")
    eye = np.eye(a.shape[0])
    rel = start
    while rel <= max_jitter * (1 + 1e-9):
        jit = rel * scale
        try:
            return la.cholesky(a + jit * eye, lower=True, check_finite=False), jit
        except la.LinAlgError:
            rel *= 10
    raise ConditioningError(f"Cholesky failed with jitter up to {max_jitter:g} x mean diagonal")


def _chol_inverse(L):
    # L has a zero upper triangle, so dpotri leaves it zero
    inv, info = dpotri(L, lower=1)
    if info != 0:
        raise ConditioningError(f"dpotri failed (info={info})")
    diag = inv.diagonal().copy()
    inv += inv.T
    inv[np.diag_indices_from(inv)] = diag
    return inv


# --------------------------------------------------------------------------
# Marginal likelihood


def _sq_diffs(x):
    """Per-dimension squared differences, shape ``(p, n, n)``."""
    return (x.T[:, :, None] - x.T[:, None, :]) ** 2


def _evidence(h, sq, y0, adj=None, return_grad=False):
    # adj is the rank-one term varsigma**2 g g' added to the prior Gram
    n = y0.shape[0]
    a2 = h.lengthscale_rates**2
    if h.p:
        K = h.nu**2 * np.exp(-0.5 * np.tensordot(a2, sq, axes=1))
    else:
        K = np.full((n, n), h.nu**2)
    S = K + h.sigma**2 * np.eye(n)
    if adj is not None:
        S += adj
    L, _ = jitter_cholesky(S)
    r = y0 - h.mu
    alpha = la.cho_solve((L, True), r, check_finite=False)
    lml = -0.5 * r @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * _LOG_2PI
    if not return_grad:
        return float(lml)

    W = np.outer(alpha, alpha)
    W -= _chol_inverse(L)
    WK = W * K
    grad = np.empty(h.p + 3)
    grad[0] = alpha.sum()
    grad[1] = WK.sum() / h.nu
    if h.p:
        grad[2:-1] = -0.5 * h.lengthscale_rates * (sq.reshape(h.p, -1) @ WK.ravel())
    grad[-1] = h.sigma * np.trace(W)
    return float(lml), grad


def log_marginal_likelihood(h, x0, y0, cfg=None, return_grad=False):
    """Gaussian evidence of ``y0`` under the (possibly adjusted) GP prior.

    The gradient, when requested, is taken with respect to
    ``[mu, nu, a_1..a_p, sigma]`` with ``varsigma`` held fixed.
    """
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float).ravel()
    if x0.shape != (y0.shape[0], h.p):
        raise ValueError(f"x0 must be {y0.shape[0]} x {h.p}, got {x0.shape}")
    adj = None
    if cfg is not None and cfg.varsigma != 0:
        g = cfg.gamma_control
        if g.shape[0] != y0.shape[0]:
            raise ValueError("gamma_control must align with the training rows")
        adj = cfg.varsigma**2 * np.outer(g, g)
    return _evidence(h, _sq_diffs(x0), y0, adj, return_grad)


def _scales(x0, y0):
    s = float(np.std(y0))
    if not s > 1e-12 * max(1.0, float(np.max(np.abs(y0)))):
        s = 1.0
    xs = np.std(x0, axis=0) if x0.shape[0] else np.ones(x0.shape[1])
    xs = np.where(xs > 0, xs, 1.0)
    return s, xs


# (nu / sd(y), sigma / sd(y), lengthscale / sd(x))
_START_GRID = (
    (0.8, 0.6, 1.0),
    (1.0, 0.3, 2.0),
    (0.5, 0.8, 0.5),
    (2.0, 0.2, 4.0),
    (0.3, 0.9, 8.0),
)


def _start_points(x0, y0, n_starts):
    s, xs = _scales(x0, y0)
    mu0 = float(np.mean(y0))
    starts = []
    for k in range(n_starts):
        nu_f, sig_f, ell = _START_GRID[k % len(_START_GRID)]
        # cycle the grid with wider lengthscales when more starts are requested
        ell = ell * 3.0 ** (k // len(_START_GRID))
        starts.append(
            np.concatenate(
                [[mu0, math.log(nu_f * s)], np.log(1.0 / (ell * xs)), [math.log(sig_f * s)]]
            )
        )
    return starts


def _bounds(x0, y0):
    s, xs = _scales(x0, y0)
    b = [(None, None), (math.log(1e-3 * s), math.log(1e3 * s))]
    b += [(math.log(1e-4 / v), math.log(1e2 / v)) for v in xs]
    b.append((math.log(1e-4 * s), math.log(1e1 * s)))
    return b


def optimize_hyperparameters(x0, y0, n_starts=5, maxiter=200, return_evidence=False):
    """Maximise the evidence over ``(mu, log nu, log a, log sigma)``.

    Multi-start L-BFGS-B from a deterministic grid scaled by the data; the
    best point found (never worse than the best start) is returned.
    """
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float).ravel()
    if y0.shape[0] < 2:
        raise ValueError("need at least 2 control observations")
    bounds = _bounds(x0, y0)
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])

    sq = _sq_diffs(x0)

    def objective(theta):
        h = GPHyperParams.from_vector(theta)
        lml, g = _evidence(h, sq, y0, return_grad=True)
        dtheta = g.copy()
        dtheta[1:-1] *= np.exp(theta[1:-1])
        dtheta[-1] *= h.sigma
        return -lml, -dtheta

    best_theta, best_val = None, -np.inf
    for theta0 in _start_points(x0, y0, n_starts):
        theta0 = np.clip(theta0, lo, hi)
        try:
            start_val = -objective(theta0)[0]
        except ConditioningError:
            continue
        if start_val > best_val:
            best_theta, best_val = theta0, start_val
        try:
            res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter})
        except ConditioningError:
            continue
        if np.all(np.isfinite(res.x)) and -res.fun > best_val:
            best_theta, best_val = np.clip(res.x, lo, hi), -res.fun
    if best_theta is None:
        raise ConditioningError("every optimiser start failed to factorise")
    h = GPHyperParams.from_vector(best_theta)
    return (h, float(best_val)) if return_evidence else h


# --------------------------------------------------------------------------
# Posterior


def gp_posterior(h, x0, y0, x_all, cfg=None, train_index=None):
    """Closed-form posterior of the conditional mean at every row of ``x_all``.

    Parameters
    ----------
    h : GPHyperParams
    x0, y0 : training covariates and outcomes (the control arm)
    x_all : evaluation covariates
    cfg : AdjustedKernelConfig, optional
        ``gamma_control`` aligned with ``x_all``; requires ``train_index``.
    train_index : array of int, optional
        Positions of the ``x0`` rows inside ``x_all``.
    """
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float).ravel()
    x_all = np.asarray(x_all, dtype=float)
    if train_index is not None:
        idx = np.asarray(train_index)
        Kxx = se_gram(x_all, x_all, h)
        if cfg is not None:
            g = cfg.gamma_control
            if g.shape[0] != x_all.shape[0]:
                raise ValueError("gamma_control must align with x_all")
            Kxx = adjusted_gram(Kxx, g, g, cfg.varsigma)
        Kx0 = Kxx[:, idx]
        K00 = Kx0[idx]
    else:
        if cfg is not None and cfg.varsigma != 0:
            raise ValueError("an adjusted kernel needs train_index to locate gamma on x0")
        Kxx = se_gram(x_all, x_all, h)
        Kx0 = se_gram(x_all, x0, h)
        K00 = se_gram(x0, x0, h)
    S = K00 + h.sigma**2 * np.eye(K00.shape[0])
    L, _ = jitter_cholesky(S)
    alpha = la.cho_solve((L, True), y0 - h.mu, check_finite=False)
    mean = h.mu + Kx0 @ alpha
    A = la.solve_triangular(L, Kx0.T, lower=True, check_finite=False)
    cov = Kxx - A.T @ A
    cov = 0.5 * (cov + cov.T)
    chol, jit = jitter_cholesky(cov)
    return GaussianPosterior(mean=mean, cov=cov, chol=chol, jitter=jit)


def sample_posterior(post, rng, size=None):
    """Draw ``mean + chol @ z``; ``size`` draws come back as rows."""
    if size is None:
        z = rng.standard_normal(post.n)
        return post.mean + post.chol @ z
    z = rng.standard_normal((size, post.n))
    return post.mean + z @ post.chol.T


# --------------------------------------------------------------------------
# Estimator wrapper


class GPMeanRegressor(RegressorMixin, BaseEstimator):
    """Constant-mean GP regression with an SE-ARD kernel.

    Parameters
    ----------
    n_starts : int
        Optimiser restarts for the marginal likelihood.
    hyperparams : GPHyperParams, optional
        Skip optimisation and use these values.
    """

    def __init__(self, n_starts=5, hyperparams=None):
        self.n_starts = n_starts
        self.hyperparams = hyperparams

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True, ensure_min_samples=2)
        if self.hyperparams is not None:
            self.hyperparams_ = self.hyperparams
            self.log_marginal_likelihood_ = log_marginal_likelihood(self.hyperparams, X, y)
        else:
            self.hyperparams_, self.log_marginal_likelihood_ = optimize_hyperparameters(
                X, y, n_starts=self.n_starts, return_evidence=True
            )
        self.X_train_ = X
        self.y_train_ = y
        self.n_features_in_ = X.shape[1]
        return self

    def posterior(self, X):
        """Joint :class:`GaussianPosterior` at the rows of ``X``."""
        check_is_fitted(self, "hyperparams_")
        X = check_array(X)
        return gp_posterior(self.hyperparams_, self.X_train_, self.y_train_, X)

    def predict(self, X, return_std=False):
        post = self.posterior(X)
        if return_std:
            return post.mean, np.sqrt(np.clip(np.diag(post.cov), 0, None))
        return post.mean
