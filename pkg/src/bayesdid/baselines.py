"""Frequentist comparison estimators for the ATT.

All standard errors are plug-in influence-function based, except TWFE which
uses OLS with unit-clustered sandwich variance.  Intervals are normal.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator

from ._validation import check_did_inputs
from .data import DiDSample, PanelDataset
from .exceptions import RankDeficiencyError, UnusableSampleError
from .propensity import DEFAULT_CLIP, fit_logistic

__all__ = [
    "FrequentistResult",
    "ols_control_fit",
    "or_estimator",
    "dr_estimator",
    "ipw_ht",
    "ipw_hajek",
    "hajek_contrast",
    "twfe",
    "FrequentistDiD",
]

METHODS = ("or", "dr", "ipw_ht", "ipw_hajek", "twfe")


@dataclass(frozen=True)
class FrequentistResult:
    estimate: float
    std_err: float
    ci_low: float
    ci_high: float
    method: str
    alpha: float = 0.05

    @classmethod
    def normal(cls, estimate, std_err, method, alpha=0.05):
        if not np.isfinite(std_err) or std_err < 0:
            raise ValueError(f"invalid standard error {std_err!r}")
        half = norm.ppf(1 - alpha / 2) * std_err
        return cls(float(estimate), float(std_err), float(estimate - half),
                   float(estimate + half), method, alpha)

    @property
    def ci_length(self):
        return self.ci_high - self.ci_low

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high


def _design(x):
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones(x.shape[0]), x.reshape(x.shape[0], -1)])


def _if_se(psi):
    psi = np.asarray(psi, dtype=float)
    return float(np.sqrt(np.var(psi) / psi.shape[0]))


def _full_rank(Z, what):
    if Z.shape[0] < Z.shape[1] or np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RankDeficiencyError(f"{what} design is rank deficient "
                                  f"({Z.shape[0]} rows, {Z.shape[1]} columns)")


def ols_control_fit(sample):
    """OLS of ``dy`` on ``[1, X]`` over the control arm.

    Returns the coefficient vector (intercept first).
    """
    Z0 = _design(sample.x[sample.control])
    _full_rank(Z0, "control-arm regression")
    return np.linalg.lstsq(Z0, sample.dy[sample.control], rcond=None)[0]


def _treated_check(sample):
    if sample.n_treated < 1:
        raise UnusableSampleError("no treated units")


def or_estimator(sample, alpha=0.05):
    """Imputation estimator with a linear control-arm regression.

    The standard error accounts for estimating the regression coefficients.
    """
    _treated_check(sample)
    beta = ols_control_fit(sample)
    Z = _design(sample.x)
    d = sample.d.astype(float)
    n, pi = sample.n, d.mean()
    resid = sample.dy - Z @ beta
    tau = float(np.sum(d * resid) / d.sum())

    c = 1 - d
    Q = (Z * c[:, None]).T @ Z / n
    zbar_t = (Z * d[:, None]).mean(axis=0) / pi
    lin = np.linalg.solve(Q, zbar_t)
    psi = d * (resid - tau) / pi - c * resid * (Z @ lin)
    return FrequentistResult.normal(tau, _if_se(psi), "or", alpha)


def dr_estimator(sample, riesz, mhat, alpha=0.05):
    """Average of ``gamma_hat(D, X) (dy - mhat(X))``.

    Parameters
    ----------
    sample : DiDSample
    riesz : RieszModel
    mhat : array of length n
        Control-arm conditional mean evaluated at every unit.
    """
    mhat = np.asarray(mhat, dtype=float).ravel()
    if mhat.shape[0] != sample.n:
        raise ValueError("mhat must have one value per unit")
    g = riesz.riesz(sample.d, sample.x)
    terms = g * (sample.dy - mhat)
    tau = float(terms.mean())
    psi = terms - sample.d / riesz.pi_hat * tau
    return FrequentistResult.normal(tau, _if_se(psi), "dr", alpha)


def _logit_score_terms(riesz, x, d):
    """Per-unit logit score and average Hessian at the fitted coefficients."""
    Z = _design(x)
    p = 1 / (1 + np.exp(-Z @ riesz.coef))
    H = (Z * (p * (1 - p))[:, None]).T @ Z / Z.shape[0]
    return Z, p, H


def ipw_ht(sample, riesz, alpha=0.05):
    """Horvitz-Thompson type weighting estimator.

    ``tau = (1/(n pi)) sum dy (D - pi(X)) / (1 - pi(X))``; the standard error
    includes the logit estimation effect.
    """
    _treated_check(sample)
    d = sample.d.astype(float)
    g = riesz.riesz(d, sample.x)
    terms = g * sample.dy
    tau = float(terms.mean())
    psi = terms - d / riesz.pi_hat * tau

    Z, _, H = _logit_score_terms(riesz, sample.x, d)
    ps = riesz.propensity(sample.x)
    dg = (d - 1) * ps / (1 - ps) / riesz.pi_hat
    G = (Z * (dg * sample.dy)[:, None]).mean(axis=0)
    psi = psi + (Z * (d - ps)[:, None]) @ np.linalg.solve(H, G)
    return FrequentistResult.normal(tau, _if_se(psi), "ipw_ht", alpha)


def hajek_contrast(dy, w1, w0):
    """Normalised treated mean minus normalised reweighted control mean."""
    dy, w1, w0 = (np.asarray(a, dtype=float) for a in (dy, w1, w0))
    s1, s0 = w1.sum(), w0.sum()
    if s1 <= 0 or s0 <= 0:
        raise UnusableSampleError("zero weight mass in one arm")
    return float(w1 @ dy / s1 - w0 @ dy / s0)


def ipw_hajek(sample, riesz, alpha=0.05):
    """Weighting estimator with weights normalised within each arm.

    Treated weights are ``D``; control weights are the odds
    ``(1 - D) pi(X) / (1 - pi(X))``.
    """
    d = sample.d.astype(float)
    ps = riesz.propensity(sample.x)
    w1, w0 = d, (1 - d) * ps / (1 - ps)
    tau = hajek_contrast(sample.dy, w1, w0)
    mu1 = w1 @ sample.dy / w1.sum()
    mu0 = w0 @ sample.dy / w0.sum()
    psi = w1 * (sample.dy - mu1) / w1.mean() - w0 * (sample.dy - mu0) / w0.mean()

    Z, _, H = _logit_score_terms(riesz, sample.x, d)
    G = (Z * (w0 * (sample.dy - mu0))[:, None]).mean(axis=0) / w0.mean()
    psi = psi - (Z * (d - ps)[:, None]) @ np.linalg.solve(H, G)
    return FrequentistResult.normal(tau, _if_se(psi), "ipw_hajek", alpha)


def twfe(panel, alpha=0.05):
    """Pooled two-period regression of ``y`` on ``[1, D, t, D*t, X]``.

    Returns the ``D*t`` coefficient with a unit-clustered (CR1) standard
    error.
    """
    n = panel.n
    d = panel.d.astype(float)
    t = np.r_[np.zeros(n), np.ones(n)]
    dd = np.r_[d, d]
    Z = np.column_stack([np.ones(2 * n), dd, t, dd * t, np.vstack([panel.x, panel.x])])
    _full_rank(Z, "two-way fixed effects")
    y = np.r_[panel.y1, panel.y2]
    beta, *_ = np.linalg.lstsq(Z, y, rcond=None)
    u = y - Z @ beta

    bread = np.linalg.inv(Z.T @ Z)
    scores = Z[:n] * u[:n, None] + Z[n:] * u[n:, None]
    meat = scores.T @ scores
    N, k = Z.shape
    adj = n / (n - 1) * (N - 1) / (N - k) if n > 1 and N > k else 1.0
    V = adj * bread @ meat @ bread
    return FrequentistResult.normal(beta[3], float(np.sqrt(max(V[3, 3], 0.0))), "twfe", alpha)


class FrequentistDiD(BaseEstimator):
    """Estimator wrapper around the frequentist baselines.

    Parameters
    ----------
    method : {'or', 'dr', 'ipw_ht', 'ipw_hajek', 'twfe'}
    alpha : float
    reg, clip_eps : float
        Logit settings for the weighting estimators.

    ``fit(X, dy, d, y1=None)``: TWFE needs the first-period outcome ``y1``;
    the others only use the change ``dy``.
    """

    def __init__(self, method="dr", alpha=0.05, reg=0.0, clip_eps=DEFAULT_CLIP):
        self.method = method
        self.alpha = alpha
        self.reg = reg
        self.clip_eps = clip_eps

    def fit(self, X, dy, d, y1=None):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        X, dy, d = check_did_inputs(X, dy, d)
        sample = DiDSample(dy=dy, d=d, x=X)
        if self.method == "twfe":
            if y1 is None:
                raise ValueError("twfe needs first-period outcomes y1")
            y1 = np.asarray(y1, dtype=float).ravel()
            res = twfe(PanelDataset(y1=y1, y2=y1 + dy, d=d, x=X), self.alpha)
        elif self.method == "or":
            res = or_estimator(sample, self.alpha)
        else:
            riesz = fit_logistic(X, d, reg=self.reg, clip_eps=self.clip_eps)
            if self.method == "dr":
                mhat = _design(X) @ ols_control_fit(sample)
                res = dr_estimator(sample, riesz, mhat, self.alpha)
            elif self.method == "ipw_ht":
                res = ipw_ht(sample, riesz, self.alpha)
            else:
                res = ipw_hajek(sample, riesz, self.alpha)
        self.result_ = res
        self.att_ = res.estimate
        self.std_err_ = res.std_err
        self.ci_ = (res.ci_low, res.ci_high)
        self.n_features_in_ = X.shape[1]
        return self
