"""Logistic propensity score and the plug-in Riesz representer.

    gamma_hat(d, x) = (d - pi_hat(x)) / ((1 - pi_hat(x)) * pi_hat)

where ``pi_hat(x)`` is a logit fit and ``pi_hat`` the treated share.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConvergenceError

__all__ = ["RieszModel", "fit_logistic", "propensity_at", "riesz_hat", "LogitPropensity"]

DEFAULT_CLIP = 1e-6


@dataclass(frozen=True)
class RieszModel:
    """Fitted logit coefficients (intercept first) plus the treated share."""

    coef: np.ndarray
    pi_hat: float
    clip_eps: float = DEFAULT_CLIP

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float, ndmin=1).ravel()
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)
        if not np.all(np.isfinite(coef)):
            raise ValueError("logit coefficients must be finite")
        if not 0 < self.pi_hat < 1:
            raise ValueError(f"treated share must lie in (0, 1), got {self.pi_hat}")
        if not 0 <= self.clip_eps < 0.5:
            raise ValueError(f"clip_eps must lie in [0, 0.5), got {self.clip_eps}")

    @property
    def p(self):
        return self.coef.shape[0] - 1

    def linear_predictor(self, x):
        x = np.asarray(x, dtype=float)
        return self.coef[0] + x @ self.coef[1:]

    def propensity(self, x):
        """Clipped ``pi_hat(x)`` for a point or a matrix of rows."""
        return np.clip(expit(self.linear_predictor(x)), self.clip_eps, 1 - self.clip_eps)

    def riesz(self, d, x):
        ps = self.propensity(x)
        return (np.asarray(d, dtype=float) - ps) / ((1 - ps) * self.pi_hat)


def _design(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return np.column_stack([np.ones(x.shape[0]), x])


def _penalized_loglik(Z, d, beta, reg):
    eta = Z @ beta
    ll = np.sum(d * log_expit(eta) + (1 - d) * log_expit(-eta))
    return ll - 0.5 * reg * np.sum(beta[1:] ** 2)


def fit_logistic(x, d, reg=0.0, clip_eps=DEFAULT_CLIP, max_iter=100, tol=1e-8):
    """Ridge-penalised logit by damped Newton iterations.

    Parameters
    ----------
    x : (n, p) covariates; ``p`` may be zero (intercept-only model).
    d : (n,) binary treatment.
    reg : ridge penalty on the slopes (the intercept is never penalised).
    tol : convergence threshold on the sup-norm of the average score.

    Raises
    ------
    ConvergenceError
        On single-class ``d``, perfect separation without a penalty, or no
        convergence within ``max_iter``.
    """
    d = np.asarray(d, dtype=float).ravel()
    Z = _design(x)
    n, k = Z.shape
    if d.shape[0] != n:
        raise ValueError("x and d have different lengths")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    pi_share = float(d.mean())
    if pi_share in (0.0, 1.0):
        raise ConvergenceError("treatment has a single class")

    penalty = np.full(k, float(reg))
    penalty[0] = 0.0
    beta = np.zeros(k)
    beta[0] = np.log(pi_share / (1 - pi_share))
    ll = _penalized_loglik(Z, d, beta, reg)
    for _ in range(max_iter):
        p = expit(Z @ beta)
        grad = Z.T @ (d - p) - penalty * beta
        if reg == 0 and np.all(np.abs(d - p) < 1e-6):
            raise ConvergenceError("perfect separation: logit MLE does not exist (set reg > 0)")
        if np.max(np.abs(grad)) / n <= tol:
            return RieszModel(coef=beta, pi_hat=pi_share, clip_eps=clip_eps)
        w = p * (1 - p)
        H = (Z * w[:, None]).T @ Z + np.diag(penalty)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _penalized_loglik(Z, d, cand, reg)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_new
    raise ConvergenceError(f"logit did not converge in {max_iter} iterations")


def propensity_at(model, x):
    """``pi_hat(x)`` clipped to ``[clip_eps, 1 - clip_eps]``."""
    out = model.propensity(x)
    return float(out) if np.ndim(out) == 0 else out


def riesz_hat(model, d, x):
    """Plug-in Riesz representer ``gamma_hat(d, x)``."""
    out = model.riesz(d, x)
    return float(out) if np.ndim(out) == 0 else out


class LogitPropensity(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_logistic`.

    Parameters
    ----------
    reg : float
        Ridge penalty on the slopes.
    clip_eps : float
        Probability clipping bound.
    """

    def __init__(self, reg=0.0, clip_eps=DEFAULT_CLIP):
        self.reg = reg
        self.clip_eps = clip_eps

    def fit(self, X, d):
        X, d = check_X_y(X, d, ensure_min_features=0)
        self.model_ = fit_logistic(X, d, reg=self.reg, clip_eps=self.clip_eps)
        self.classes_ = np.array([0, 1])
        self.intercept_ = self.model_.coef[0]
        self.coef_ = self.model_.coef[1:]
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, ensure_min_features=0)
        ps = self.model_.propensity(X)
        return np.column_stack([1 - ps, ps])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def riesz(self, d, X):
        check_is_fitted(self, "model_")
        return self.model_.riesz(d, check_array(X, ensure_min_features=0))
