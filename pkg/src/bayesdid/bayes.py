"""Posterior sampling for the ATT.

Two samplers share the same building blocks:

* ``run_algorithm1`` places an SE Gaussian-process prior on the control-arm
  conditional mean ``m`` and a Bayesian bootstrap on the data distribution;
  each draw is the bootstrap-weighted treated-arm mean of ``dy - m^s``.
* ``run_algorithm2`` adds the Riesz direction ``gamma_hat(0, .)`` to the
  prior covariance and subtracts the correction
  ``(1/n) sum_i gamma_hat(D_i, X_i) (m_hat - m^s)(X_i)`` from every draw.

Random numbers come from one master seed split into independent substreams
for the ``m`` draws, the bootstrap weights and the sample split, so runs
with the same seed share their weight and normal draws across samplers.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_did_inputs
from .data import DiDSample
from .exceptions import DegenerateDrawError, UnusableSampleError
from .gp import (
    AdjustedKernelConfig,
    gp_posterior,
    optimize_hyperparameters,
    varsigma_rule,
)
from .propensity import DEFAULT_CLIP, RieszModel, fit_logistic

__all__ = [
    "ATTPosterior",
    "DRBayesConfig",
    "bayesian_bootstrap_weights",
    "att_draw",
    "pilot_mhat",
    "correction_term",
    "credible_interval",
    "run_algorithm1",
    "run_algorithm2",
    "BayesDiD",
    "DRBayesDiD",
]

MAX_REDRAWS = 100


@dataclass(frozen=True)
class ATTPosterior:
    """Posterior draws of the ATT with their mean and equal-tailed interval."""

    draws: np.ndarray
    method: str
    point: float
    ci_low: float
    ci_high: float
    alpha: float
    correction: np.ndarray = None
    varsigma: float = None

    @classmethod
    def from_draws(cls, draws, method, alpha, **extra):
        draws = np.asarray(draws, dtype=float).ravel()
        if draws.size == 0 or not np.all(np.isfinite(draws)):
            raise ValueError("posterior draws must be non-empty and finite")
        lo, hi = credible_interval(draws, alpha)
        return cls(draws=draws, method=method, point=float(draws.mean()),
                   ci_low=lo, ci_high=hi, alpha=alpha, **extra)

    @property
    def ci_length(self):
        return self.ci_high - self.ci_low

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high


@dataclass(frozen=True)
class DRBayesConfig:
    """Sampler settings shared by both algorithms.

    ``varsigma`` overrides the data-driven prior-adjustment rule when set.
    """

    B: int = 5000
    c_varsigma: float = 1.0
    sample_split: bool = False
    alpha: float = 0.05
    seed: int = 0
    n_starts: int = 5
    clip_eps: float = DEFAULT_CLIP
    reg: float = 0.0
    varsigma: float = None

    def __post_init__(self):
        if int(self.B) < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.c_varsigma <= 0:
            raise ValueError("c_varsigma must be positive")
        if self.varsigma is not None and self.varsigma < 0:
            raise ValueError("varsigma must be non-negative")


def _streams(seed):
    m_ss, w_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(m_ss), np.random.default_rng(w_ss),
            np.random.default_rng(split_ss))


# --------------------------------------------------------------------------
# Building blocks


def bayesian_bootstrap_weights(n, rng, size=None):
    """Normalised ``Exp(1)`` weights, i.e. a flat Dirichlet draw.

    With ``size`` the result has one weight vector per row.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = (n,) if size is None else (size, n)
    e = rng.standard_exponential(shape)
    tot = e.sum(axis=-1, keepdims=True)
    bad = np.flatnonzero(np.ravel(tot) <= 0)
    for _ in range(MAX_REDRAWS):
        if not bad.size:
            break
        if size is None:
            e = rng.standard_exponential(n)
        else:
            e[bad] = rng.standard_exponential((bad.size, n))
        tot = e.sum(axis=-1, keepdims=True)
        bad = np.flatnonzero(np.ravel(tot) <= 0)
    else:
        raise DegenerateDrawError("bootstrap weights underflowed repeatedly")
    return e / tot


def att_draw(weights, d, dy, m_draw):
    """Weighted treated-arm mean of ``dy - m_draw``.

    ``weights`` and ``m_draw`` may hold one draw per row, in which case a
    vector of draws is returned.
    """
    d = np.asarray(d, dtype=float)
    w = np.asarray(weights, dtype=float) * d
    den = w.sum(axis=-1)
    if np.any(den <= 0):
        raise DegenerateDrawError("bootstrap draw puts no weight on treated units")
    num = (w * (np.asarray(dy, dtype=float) - np.asarray(m_draw, dtype=float))).sum(axis=-1)
    out = num / den
    return float(out) if np.ndim(out) == 0 else out


def _weights_with_treated_mass(n, d, rng, B):
    W = bayesian_bootstrap_weights(n, rng, size=B)
    for _ in range(MAX_REDRAWS):
        bad = np.flatnonzero(W @ d <= 0)
        if not bad.size:
            return W
        W[bad] = bayesian_bootstrap_weights(n, rng, size=bad.size)
    raise DegenerateDrawError("could not draw weights with positive treated mass")


def pilot_mhat(draws):
    """Column means of a ``(B, n)`` array of conditional-mean draws."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        return draws.copy()
    return draws.mean(axis=0)


def correction_term(riesz, d, x, mhat, m_draw):
    """``(1/n) sum_i gamma_hat(D_i, X_i) (mhat - m_draw)(X_i)`` over all units."""
    gamma = riesz.riesz(d, x)
    diff = np.asarray(mhat, dtype=float) - np.asarray(m_draw, dtype=float)
    out = diff @ gamma / gamma.shape[0]
    return float(out) if np.ndim(out) == 0 else out


def credible_interval(draws, alpha):
    """Equal-tailed interval from linearly interpolated (type-7) quantiles."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    draws = np.asarray(draws, dtype=float).ravel()
    if draws.size == 0:
        raise ValueError("no draws")
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2], method="linear")
    return float(lo), float(hi)


def _draw_m(post, Z):
    return post.mean + Z @ post.chol.T


def _control_fit(sample, cfg, hyperparams):
    ctrl = np.flatnonzero(sample.control)
    x0, y0 = sample.x[ctrl], sample.dy[ctrl]
    h = hyperparams if hyperparams is not None else optimize_hyperparameters(
        x0, y0, n_starts=cfg.n_starts)
    return ctrl, x0, y0, h


# --------------------------------------------------------------------------
# Samplers


def run_algorithm1(sample, cfg=None, hyperparams=None):
    """ATT posterior under a plain GP prior on the control-arm mean.

    Parameters
    ----------
    sample : DiDSample
    cfg : DRBayesConfig, optional
    hyperparams : GPHyperParams, optional
        Reuse an existing fit instead of maximising the evidence again.
    """
    cfg = cfg or DRBayesConfig()
    sample.require_usable()
    rng_m, rng_w, _ = _streams(cfg.seed)
    ctrl, x0, y0, h = _control_fit(sample, cfg, hyperparams)
    post = gp_posterior(h, x0, y0, sample.x, train_index=ctrl)
    M = _draw_m(post, rng_m.standard_normal((cfg.B, sample.n)))
    W = _weights_with_treated_mass(sample.n, sample.d, rng_w, cfg.B)
    tau = att_draw(W, sample.d, sample.dy, M)
    return ATTPosterior.from_draws(tau, "bayes", cfg.alpha)


def _split_halves(sample, rng):
    n = sample.n
    perm = rng.permutation(n)
    a, b = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
    return a, b


def run_algorithm2(sample, cfg=None, hyperparams=None):
    """Double robust ATT posterior: adjusted prior plus posterior correction.

    Without sample splitting the full sample is used both for the pilot
    estimates (logit propensity, unadjusted posterior mean) and for the
    posterior draws.  With ``cfg.sample_split`` a seeded random half fits the
    pilots and the other half carries the draws; the treated share always
    comes from the full sample.
    """
    cfg = cfg or DRBayesConfig()
    sample.require_usable()
    rng_m, rng_w, rng_s = _streams(cfg.seed)
    pi_share = float(np.mean(sample.d))

    if cfg.sample_split:
        ia, ib = _split_halves(sample, rng_s)
        pilot, main = sample.subset(ia), sample.subset(ib)
        if pilot.n_treated < 1 or pilot.n_control < 2:
            raise UnusableSampleError("pilot half lacks treated or control units")
        main.require_usable()
        logit = fit_logistic(pilot.x, pilot.d, reg=cfg.reg, clip_eps=cfg.clip_eps)
        riesz = RieszModel(coef=logit.coef, pi_hat=pi_share, clip_eps=cfg.clip_eps)
        pc, px0, py0, ph = _control_fit(pilot, cfg, None)
        post_pilot = gp_posterior(ph, px0, py0, main.x)
        Z_pilot = rng_m.standard_normal((cfg.B, main.n))
        mhat = pilot_mhat(_draw_m(post_pilot, Z_pilot))
        ctrl, x0, y0, h = _control_fit(main, cfg, hyperparams)
        post0 = None
    else:
        main = sample
        riesz = fit_logistic(main.x, main.d, reg=cfg.reg, clip_eps=cfg.clip_eps)
        ctrl, x0, y0, h = _control_fit(main, cfg, hyperparams)
        post0 = gp_posterior(h, x0, y0, main.x, train_index=ctrl)

    g0 = riesz.riesz(0, main.x)
    if cfg.varsigma is not None:
        vs = float(cfg.varsigma)
    else:
        vs = varsigma_rule(h.nu, g0, main.d, cfg.c_varsigma)
    postc = gp_posterior(h, x0, y0, main.x, cfg=AdjustedKernelConfig(vs, g0), train_index=ctrl)

    Z = rng_m.standard_normal((cfg.B, main.n))
    Mc = _draw_m(postc, Z)
    if post0 is not None:
        mhat = pilot_mhat(_draw_m(post0, Z))
    W = _weights_with_treated_mass(main.n, main.d, rng_w, cfg.B)
    tau = att_draw(W, main.d, main.dy, Mc)
    b = correction_term(riesz, main.d, main.x, mhat, Mc)
    return ATTPosterior.from_draws(tau - b, "dr_bayes", cfg.alpha, correction=b, varsigma=vs)


# --------------------------------------------------------------------------
# Estimator API


class BayesDiD(BaseEstimator):
    """ATT posterior with a Gaussian-process prior on the control trend.

    Parameters
    ----------
    n_draws : int
        Posterior draws ``B``.
    alpha : float
        One minus the credible level.
    random_state : int
        Master seed.
    n_starts : int
        Restarts for the marginal-likelihood search.

    Attributes
    ----------
    posterior_ : ATTPosterior
    att_ : float
        Posterior mean.
    ci_ : tuple of float
    """

    _method = "bayes"

    def __init__(self, n_draws=5000, alpha=0.05, random_state=0, n_starts=5):
        self.n_draws = n_draws
        self.alpha = alpha
        self.random_state = random_state
        self.n_starts = n_starts

    def _config(self):
        return DRBayesConfig(B=self.n_draws, alpha=self.alpha, seed=self.random_state,
                             n_starts=self.n_starts)

    def _run(self, sample):
        return run_algorithm1(sample, self._config())

    def fit(self, X, dy, d):
        X, dy, d = check_did_inputs(X, dy, d)
        sample = DiDSample(dy=dy, d=d, x=X)
        self.posterior_ = self._run(sample)
        self.att_ = self.posterior_.point
        self.ci_ = (self.posterior_.ci_low, self.posterior_.ci_high)
        self.n_features_in_ = X.shape[1]
        return self

    def sample_posterior(self):
        check_is_fitted(self, "posterior_")
        return self.posterior_.draws


class DRBayesDiD(BayesDiD):
    """Double robust variant with prior adjustment and posterior correction.

    Extra parameters: ``c_varsigma`` scales the adjustment sd,
    ``sample_split`` fits the pilots on a random half, ``reg`` and
    ``clip_eps`` configure the logit propensity.
    """

    _method = "dr_bayes"

    def __init__(self, n_draws=5000, alpha=0.05, random_state=0, n_starts=5,
                 c_varsigma=1.0, sample_split=False, reg=0.0, clip_eps=DEFAULT_CLIP):
        super().__init__(n_draws=n_draws, alpha=alpha, random_state=random_state,
                         n_starts=n_starts)
        self.c_varsigma = c_varsigma
        self.sample_split = sample_split
        self.reg = reg
        self.clip_eps = clip_eps

    def _config(self):
        return DRBayesConfig(B=self.n_draws, alpha=self.alpha, seed=self.random_state,
                             n_starts=self.n_starts, c_varsigma=self.c_varsigma,
                             sample_split=self.sample_split, reg=self.reg,
                             clip_eps=self.clip_eps)

    def _run(self, sample):
        return run_algorithm2(sample, self._config())
