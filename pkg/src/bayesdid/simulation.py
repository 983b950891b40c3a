"""Monte Carlo designs and the replication harness.

The data generating process for ``p`` covariates is::

    X ~ N((1, -1, 1, ...), S),  S_jk = 0.5 ** |j - k|
    D | X ~ Bernoulli(logistic(g(X)))
    Y1 = h(X) + D mu(X) + a + e1
    Y2(d) = 2 + 2 mu(X) + D mu(X) + a + e2(d)

so that ``Y2(1) - Y2(0) = e2(1) - e2(0)`` and the ATT is zero.  With
``mu = k h`` the control trend is ``E[dY | X, D=0] = 2 + (2k - 1) h(X)``.

Designs differ in ``g`` and ``h`` (writing ``L = sum_j x_j / j`` and
``Q = sum_j x_j**2 / j``):

======  ==========================  ====================
design  g                           h
======  ==========================  ====================
I       0.5 L                       L
II      0.5 L                       0.8 L + 0.2 Q
III     0.5 (L + Q) / 4             L
IV      0.5 (L + Q) / 4             0.8 L + 0.2 Q
======  ==========================  ====================
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .baselines import (
    _design,
    dr_estimator,
    ipw_hajek,
    ipw_ht,
    ols_control_fit,
    or_estimator,
    twfe,
)
from .bayes import DRBayesConfig, run_algorithm1, run_algorithm2
from .data import DiDSample, PanelDataset
from .exceptions import BayesDiDError
from .gp import optimize_hyperparameters
from .propensity import fit_logistic

__all__ = [
    "DESIGNS",
    "ERROR_KINDS",
    "METHOD_TAGS",
    "SimDesignConfig",
    "MethodMetrics",
    "MCMetrics",
    "covariance_matrix",
    "design_functions",
    "draw_errors",
    "simulate_units",
    "generate_design",
    "run_replication",
    "run_monte_carlo",
    "metrics_report",
    "parse_metrics_csv",
    "extreme_pscore_config",
    "paper_scale",
]

DESIGNS = ("I", "II", "III", "IV")
ERROR_KINDS = ("normal", "chisq3", "hetero")
METHOD_TAGS = ("bayes", "dr_bayes", "or", "dr", "ipw_ht", "ipw_hajek", "twfe")
MAX_FAILURE_SHARE = 0.01


@dataclass(frozen=True)
class SimDesignConfig:
    """One Monte Carlo cell.

    Parameters
    ----------
    design : {'I', 'II', 'III', 'IV'}
    n, p : int
        Sample size (>= 50) and covariate dimension (>= 1).
    error_kind : {'normal', 'chisq3', 'hetero'}
    reps : int
        Replications.
    B : int
        Posterior draws per replication for the Bayesian methods.
    seed : int
        Master seed; replication ``r`` uses the ``r``-th spawned substream.
    mu_scale : float
        ``mu(X) = mu_scale * h(X)``.
    g_scale : float, optional
        Multiplier on the propensity index; ``None`` keeps the design's 0.5.
    n_starts : int
        Restarts for the GP evidence search.
    c_varsigma, sample_split :
        Passed to the double robust sampler.
    """

    design: str = "I"
    n: int = 1000
    p: int = 5
    error_kind: str = "normal"
    reps: int = 200
    B: int = 1000
    seed: int = 0
    mu_scale: float = 1.5
    g_scale: float = None
    n_starts: int = 2
    c_varsigma: float = 1.0
    sample_split: bool = False

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {', '.join(DESIGNS)}; got {self.design!r}")
        if self.error_kind not in ERROR_KINDS:
            raise ValueError(f"error_kind must be one of {', '.join(ERROR_KINDS)}; "
                             f"got {self.error_kind!r}")
        if self.n < 50:
            raise ValueError(f"n must be >= 50, got {self.n}")
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps}")
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")


def extreme_pscore_config(**overrides):
    """Design I with the propensity index ``sum_j x_j / j`` (no 0.5 factor).

    Produces propensity scores close to 0 and 1, as used in trimming studies.
    """
    return SimDesignConfig(**{"design": "I", "g_scale": 1.0, **overrides})


# --------------------------------------------------------------------------
# Data generation


def covariance_matrix(p):
    idx = np.arange(p)
    return 0.5 ** np.abs(idx[:, None] - idx[None, :])


def covariate_mean(p):
    return np.where(np.arange(p) % 2 == 0, 1.0, -1.0)


def design_functions(design, g_scale=None):
    """Return ``(g, h)`` callables mapping an ``(n, p)`` matrix to ``(n,)``."""
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}")
    scale = 0.5 if g_scale is None else float(g_scale)

    def lin(x):
        return x @ (1.0 / np.arange(1, x.shape[1] + 1))

    def quad(x):
        return (x ** 2) @ (1.0 / np.arange(1, x.shape[1] + 1))

    if design in ("I", "II"):
        def g(x):
            return scale * lin(x)
    else:
        def g(x):
            return scale * (lin(x) + quad(x)) / 4

    if design in ("I", "III"):
        h = lin
    else:
        def h(x):
            return 0.8 * lin(x) + 0.2 * quad(x)
    return g, h


def hetero_variance(x):
    """``sum_j (x_j - m_j)**2 / (2p)`` with ``m`` the covariate mean."""
    p = x.shape[1]
    return np.sum((x - covariate_mean(p)) ** 2, axis=1) / (2 * p)


def draw_errors(kind, n, rng):
    """Three rows of unit-variance errors ``(e1, e2(0), e2(1))``.

    ``chisq3`` draws are centred and scaled chi-square(3); ``normal`` and
    ``hetero`` return standard normals (``hetero`` is rescaled by the caller).
    """
    if kind == "chisq3":
        return (rng.chisquare(3, size=(3, n)) - 3) / math.sqrt(6)
    return rng.standard_normal((3, n))


def simulate_units(cfg, rng):
    """Covariates, treatment and all potential outcomes for one data set.

    Returns a dict with keys ``x, d, y1, y2_0, y2_1``.
    """
    n, p = cfg.n, cfg.p
    g, h = design_functions(cfg.design, cfg.g_scale)
    x = rng.multivariate_normal(covariate_mean(p), covariance_matrix(p), size=n,
                                method="cholesky")
    d = (rng.random(n) < 1 / (1 + np.exp(-g(x)))).astype(float)
    hx = h(x)
    mu = cfg.mu_scale * hx
    alpha = rng.standard_normal(n)
    e1, e20, e21 = draw_errors(cfg.error_kind, n, rng)
    if cfg.error_kind == "hetero":
        sd = np.sqrt(hetero_variance(x))
        e20, e21 = sd * e20, sd * e21
    base2 = 2 + 2 * mu + d * mu + alpha
    return {"x": x, "d": d, "y1": hx + d * mu + alpha + e1,
            "y2_0": base2 + e20, "y2_1": base2 + e21}


def generate_design(cfg, rng):
    """Draw one data set.

    Returns
    -------
    panel : PanelDataset
    sample : DiDSample
        The differenced cross-section of ``panel``.
    """
    u = simulate_units(cfg, rng)
    d = u["d"]
    y2 = np.where(d == 1, u["y2_1"], u["y2_0"])
    panel = PanelDataset(y1=u["y1"], y2=y2, d=d, x=u["x"])
    return panel, DiDSample(dy=y2 - u["y1"], d=d, x=u["x"])


# --------------------------------------------------------------------------
# Replications


def _bayes_cfg(cfg, seed):
    return DRBayesConfig(B=cfg.B, seed=seed, n_starts=cfg.n_starts,
                         c_varsigma=cfg.c_varsigma, sample_split=cfg.sample_split)


def run_replication(cfg, methods, seed_seq):
    """Run ``methods`` on one simulated data set.

    Returns a dict mapping each method to ``(estimate, ci_low, ci_high)`` or
    to the error message when the estimator failed.
    """
    data_ss, est_ss = seed_seq.spawn(2)
    panel, sample = generate_design(cfg, np.random.default_rng(data_ss))
    seed = int(est_ss.generate_state(1)[0])
    out = {}
    cache = {}

    def hyper():
        if "h" not in cache:
            ctrl = sample.control
            cache["h"] = optimize_hyperparameters(sample.x[ctrl], sample.dy[ctrl],
                                                  n_starts=cfg.n_starts)
        return cache["h"]

    def riesz():
        if "r" not in cache:
            cache["r"] = fit_logistic(sample.x, sample.d)
        return cache["r"]

    for m in methods:
        try:
            if m == "bayes":
                res = run_algorithm1(sample, _bayes_cfg(cfg, seed), hyperparams=hyper())
            elif m == "dr_bayes":
                shared = None if cfg.sample_split else hyper()
                res = run_algorithm2(sample, _bayes_cfg(cfg, seed), hyperparams=shared)
            elif m == "or":
                res = or_estimator(sample)
            elif m == "dr":
                mhat = _design(sample.x) @ ols_control_fit(sample)
                res = dr_estimator(sample, riesz(), mhat)
            elif m == "ipw_ht":
                res = ipw_ht(sample, riesz())
            elif m == "ipw_hajek":
                res = ipw_hajek(sample, riesz())
            elif m == "twfe":
                res = twfe(panel)
            else:
                raise ValueError(f"unknown method {m!r}")
            point = getattr(res, "point", getattr(res, "estimate", None))
            out[m] = (float(point), float(res.ci_low), float(res.ci_high))
        except (BayesDiDError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out[m] = f"{type(exc).__name__}: {exc}"
    return out


@dataclass(frozen=True)
class MethodMetrics:
    """Bias, coverage and mean interval length of one estimator in one cell."""

    method: str
    bias: float
    cp: float
    cil: float
    mc_se: float
    reps: int
    failures: int = 0

    @property
    def valid(self):
        return self.failures <= MAX_FAILURE_SHARE * self.reps

    @classmethod
    def from_results(cls, method, rows, truth=0.0):
        ok = [r for r in rows if not isinstance(r, str)]
        fails = len(rows) - len(ok)
        if not ok:
            nan = float("nan")
            return cls(method, nan, nan, nan, nan, len(rows), fails)
        est = np.array([r[0] for r in ok])
        lo = np.array([r[1] for r in ok])
        hi = np.array([r[2] for r in ok])
        cp = float(np.mean((lo <= truth) & (truth <= hi)))
        k = len(ok)
        return cls(method, float(np.mean(est - truth)), cp, float(np.mean(hi - lo)),
                   float(math.sqrt(cp * (1 - cp) / k)), len(rows), fails)


@dataclass(frozen=True)
class MCMetrics:
    """Per-method metrics for one cell plus the raw replication records."""

    config: SimDesignConfig
    methods: dict
    records: list = field(default_factory=list, compare=False, repr=False)

    def __getitem__(self, method):
        return self.methods[method]

    def estimates(self, method):
        return np.array([r[method][0] for r in self.records if not isinstance(r[method], str)])

    def failure_messages(self, method):
        return [r[method] for r in self.records if isinstance(r[method], str)]


def run_monte_carlo(cfg, methods=METHOD_TAGS, n_jobs=1, seed_order=None):
    """Simulate ``cfg.reps`` data sets and aggregate each method's metrics.

    Parameters
    ----------
    cfg : SimDesignConfig
    methods : iterable of str
    n_jobs : int
        Worker processes (joblib); results are identical for any value.
    seed_order : sequence of int, optional
        Permutation mapping replication index to substream index; the
        default is the identity.
    """
    methods = tuple(methods)
    bad = [m for m in methods if m not in METHOD_TAGS]
    if bad:
        raise ValueError(f"unknown methods {bad}; valid: {', '.join(METHOD_TAGS)}")
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.reps)
    if seed_order is not None:
        streams = [streams[i] for i in seed_order]
    if n_jobs == 1:
        records = [run_replication(cfg, methods, s) for s in streams]
    else:
        records = Parallel(n_jobs=n_jobs)(delayed(run_replication)(cfg, methods, s)
                                          for s in streams)
    metrics = {m: MethodMetrics.from_results(m, [r[m] for r in records]) for m in methods}
    return MCMetrics(config=cfg, methods=metrics, records=records)


# --------------------------------------------------------------------------
# Reports

CSV_FIELDS = ("design", "n", "p", "error_kind", "method", "bias", "cp", "cil", "mc_se",
              "reps", "failures", "valid")


def _rows(metrics_list):
    for mc in metrics_list:
        c = mc.config
        for m in mc.methods.values():
            yield {"design": c.design, "n": c.n, "p": c.p, "error_kind": c.error_kind,
                   "method": m.method, "bias": m.bias, "cp": m.cp, "cil": m.cil,
                   "mc_se": m.mc_se, "reps": m.reps, "failures": m.failures,
                   "valid": m.valid}


def _fmt(v, spec):
    return "nan" if isinstance(v, float) and math.isnan(v) else format(v, spec)


def _text_table(metrics_list):
    ps = []
    for mc in metrics_list:
        if mc.config.p not in ps:
            ps.append(mc.config.p)
    names = []
    for mc in metrics_list:
        names += [m for m in mc.methods if m not in names]
    cell = {(mc.config.p, m.method): m for mc in metrics_list for m in mc.methods.values()}
    w = max([len("method")] + [len(n) for n in names]) + 2
    head1 = "".ljust(w) + "".join(f"p={p}".center(24) for p in ps)
    head2 = "method".ljust(w) + "".join(f"{'Bias':>8}{'CP':>8}{'CIL':>8}" for _ in ps)
    lines = [head1.rstrip(), head2]
    flagged = []
    for name in names:
        parts = [name.ljust(w)]
        for p in ps:
            m = cell.get((p, name))
            if m is None:
                parts.append(f"{'':>8}{'':>8}{'':>8}")
                continue
            parts.append(f"{_fmt(m.bias, '8.3f')}{_fmt(m.cp, '8.3f')}{_fmt(m.cil, '8.3f')}")
            if m.failures:
                flagged.append(f"{name} (p={p}): {m.failures}/{m.reps} failed"
                               + ("" if m.valid else ", cell invalid"))
        lines.append("".join(parts))
    lines += flagged
    return "\n".join(lines) + "\n"


def metrics_report(metrics, fmt="text"):
    """Serialise one or several :class:`MCMetrics`.

    ``fmt='csv'`` writes one row per (cell, method) with columns
    ``design,n,p,error_kind,method,bias,cp,cil,mc_se,reps,failures,valid``;
    floats use ``repr`` so :func:`parse_metrics_csv` recovers them exactly.
    ``fmt='json'`` writes the same rows as a list of objects under
    ``"metrics"`` together with the cell configurations.  ``fmt='text'``
    lays out one row per method and a Bias/CP/CIL column triple per ``p``.
    """
    metrics_list = [metrics] if isinstance(metrics, MCMetrics) else list(metrics)
    rows = list(_rows(metrics_list))
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()
    if fmt == "json":
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return json.dumps({"cells": [asdict(mc.config) for mc in metrics_list],
                           "metrics": [{k: clean(v) for k, v in r.items()} for r in rows]},
                          indent=2) + "\n"
    if fmt == "text":
        return _text_table(metrics_list)
    raise ValueError(f"format must be csv, json or text; got {fmt!r}")


def parse_metrics_csv(text):
    """Inverse of ``metrics_report(..., 'csv')``.

    Returns a list of ``(cell_key, MethodMetrics)`` with
    ``cell_key = (design, n, p, error_kind)``.
    """
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        key = (r["design"], int(r["n"]), int(r["p"]), r["error_kind"])
        out.append((key, MethodMetrics(method=r["method"], bias=float(r["bias"]),
                                       cp=float(r["cp"]), cil=float(r["cil"]),
                                       mc_se=float(r["mc_se"]), reps=int(r["reps"]),
                                       failures=int(r["failures"]))))
    return out


def paper_scale(cfg):
    """Same cell with 1000 replications and 5000 posterior draws."""
    return replace(cfg, reps=1000, B=5000)
