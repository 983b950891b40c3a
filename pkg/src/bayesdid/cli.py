"""Command line entry point: ``bayesdid estimate`` and ``bayesdid simulate``.

Settings are resolved in increasing priority from built-in defaults, the
JSON file named by ``$BAYESDID_CONFIG``, the JSON file given with
``--config`` and finally explicit flags.  Config keys are the long flag
names with dashes replaced by underscores, e.g.::

    {"method": ["bayes", "dr-bayes"], "draws": 2000, "trim": 0.05,
     "sample_split": false, "seed": 7}

Exit status: 0 success, 2 configuration error, 3 data error, 4 estimation
error.  Reports are written to a temporary file and renamed into place, so
an output file is either complete or absent.
"""

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np
from threadpoolctl import threadpool_limits

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
from .data import (
    DiDSample,
    PanelDataset,
    load_panel_csv,
    load_staggered_csv,
    staggered_transform,
    trim_mask,
)
from .exceptions import BayesDiDError, DataError, UnusableSampleError
from .propensity import DEFAULT_CLIP, fit_logistic
from .simulation import DESIGNS, ERROR_KINDS, SimDesignConfig, metrics_report, run_monte_carlo

ENV_CONFIG = "BAYESDID_CONFIG"
METHODS = ("bayes", "dr-bayes", "or", "dr", "ipw-ht", "ipw-hajek", "twfe")
FORMATS = ("text", "csv", "json")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4

DEFAULTS = {
    "estimate": {
        "data": None, "method": ["dr-bayes"], "trim": None, "draws": 5000, "alpha": 0.05,
        "seed": 0, "c_varsigma": 1.0, "sample_split": False, "reg": 0.0,
        "clip_eps": DEFAULT_CLIP, "n_starts": 5, "group": None, "period": None,
        "output": None, "format": "text", "threads": None,
    },
    "simulate": {
        "design": "I", "n": 1000, "p": 5, "errors": "normal", "reps": 200, "draws": 1000,
        "seed": 0, "method": list(METHODS), "c_varsigma": 1.0, "sample_split": False,
        "mu_scale": 1.5, "n_starts": 2, "paper_scale": False, "output": None,
        "format": "text", "threads": None,
    },
}


class ConfigError(Exception):
    pass


class _Stage(Exception):
    """Wraps an error with the pipeline stage and the exit code it maps to."""

    def __init__(self, stage, code, exc):
        self.stage, self.code, self.exc = stage, code, exc
        super().__init__(f"{stage}: {exc}")


def _method_list(value):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    out = [v.strip() for v in value]
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise ConfigError(f"unknown method(s) {bad or out}; valid: {', '.join(METHODS)}")
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="bayesdid", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", help="JSON config file (overrides $%s)" % ENV_CONFIG)
        p.add_argument("--method", default=S,
                       help=f"comma-separated subset of {','.join(METHODS)}")
        p.add_argument("--draws", type=int, default=S, help="posterior draws B")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--c-varsigma", type=float, default=S, dest="c_varsigma")
        p.add_argument("--sample-split", action="store_true", default=S, dest="sample_split")
        p.add_argument("--n-starts", type=int, default=S, dest="n_starts",
                       help="restarts of the GP evidence search")
        p.add_argument("--output", default=S, help="report path (default: stdout)")
        p.add_argument("--format", default=S, help="/".join(FORMATS))
        p.add_argument("--threads", type=int, default=S, help="cap on worker threads")

    est = sub.add_parser("estimate", help="estimate the ATT on a CSV panel")
    common(est)
    est.add_argument("--data", default=S, help="CSV with y1,y2,d,x1..xp (or t1..tT,cohort)")
    est.add_argument("--trim", type=float, default=S,
                     help="drop units with estimated propensity above 1 - t")
    est.add_argument("--alpha", type=float, default=S)
    est.add_argument("--reg", type=float, default=S, help="ridge penalty of the logit")
    est.add_argument("--clip-eps", type=float, default=S, dest="clip_eps")
    est.add_argument("--group", type=int, default=S, help="staggered data: cohort g")
    est.add_argument("--period", type=int, default=S, help="staggered data: period t")

    sim = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    common(sim)
    sim.add_argument("--design", default=S, help="/".join(DESIGNS))
    sim.add_argument("--n", type=int, default=S)
    sim.add_argument("--p", type=int, default=S)
    sim.add_argument("--errors", default=S, help="/".join(ERROR_KINDS))
    sim.add_argument("--reps", type=int, default=S)
    sim.add_argument("--mu-scale", type=float, default=S, dest="mu_scale")
    sim.add_argument("--paper-scale", action="store_true", default=S, dest="paper_scale",
                     help="1000 replications with 5000 draws each")
    return parser


def _read_config(path, source):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path} ({source}): {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in config {path} ({source}): {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def resolve_config(command, flags, environ=None):
    """Merge defaults, env config, ``--config`` file and flags (in that order)."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS[command])
    layers = []
    if environ.get(ENV_CONFIG):
        layers.append((_read_config(environ[ENV_CONFIG], ENV_CONFIG), ENV_CONFIG))
    flags = dict(flags)
    path = flags.pop("config", None)
    if path:
        layers.append((_read_config(path, "--config"), "--config"))
    for layer, source in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown} in {source} for '{command}'")
        cfg.update(layer)
    cfg.update(flags)
    return _validate(command, cfg)


def _validate(command, cfg):
    cfg["method"] = _method_list(cfg["method"])
    if cfg["format"] not in FORMATS:
        raise ConfigError(f"format must be one of {', '.join(FORMATS)}, got {cfg['format']!r}")
    if cfg["draws"] is None or int(cfg["draws"]) < 1:
        raise ConfigError("draws must be >= 1")
    if float(cfg["c_varsigma"]) <= 0:
        raise ConfigError("c-varsigma must be positive")
    if cfg["threads"] is not None and int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    if command == "estimate":
        if not cfg["data"]:
            raise ConfigError("estimate requires --data")
        if not 0 < float(cfg["alpha"]) < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if cfg["trim"] is not None and not 0 <= float(cfg["trim"]) < 1:
            raise ConfigError("trim must lie in [0, 1)")
        if (cfg["group"] is None) != (cfg["period"] is None):
            raise ConfigError("--group and --period must be given together")
    else:
        if cfg["design"] not in DESIGNS:
            raise ConfigError(f"invalid design {cfg['design']!r}; valid designs: "
                              f"{', '.join(DESIGNS)}")
        if cfg["errors"] not in ERROR_KINDS:
            raise ConfigError(f"invalid errors {cfg['errors']!r}; valid: {', '.join(ERROR_KINDS)}")
        if cfg["paper_scale"]:
            cfg["reps"], cfg["draws"] = 1000, 5000
        try:
            cfg["design_config"] = SimDesignConfig(
                design=cfg["design"], n=int(cfg["n"]), p=int(cfg["p"]),
                error_kind=cfg["errors"], reps=int(cfg["reps"]), B=int(cfg["draws"]),
                seed=int(cfg["seed"]), mu_scale=float(cfg["mu_scale"]),
                n_starts=int(cfg["n_starts"]), c_varsigma=float(cfg["c_varsigma"]),
                sample_split=bool(cfg["sample_split"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return cfg


# --------------------------------------------------------------------------
# Output


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".bayesdid-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text, path):
    if path:
        atomic_write(path, text)
    else:
        sys.stdout.write(text)


ESTIMATE_FIELDS = ("method", "att", "ci_low", "ci_high", "ci_length", "std_err", "n_used")


def estimate_report(rows, fmt):
    if fmt == "json":
        return json.dumps({"results": rows}, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=ESTIMATE_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: "" if r[k] is None else (repr(float(r[k])) if isinstance(r[k], float)
                                                       else r[k]) for k in ESTIMATE_FIELDS})
        return buf.getvalue()
    lines = [f"{'method':<10}{'ATT':>10}{'95% CI':>24}{'length':>10}{'n':>7}"]
    for r in rows:
        ci = f"[{r['ci_low']:.3f}, {r['ci_high']:.3f}]"
        lines.append(f"{r['method']:<10}{r['att']:>10.3f}{ci:>24}{r['ci_length']:>10.3f}"
                     f"{r['n_used']:>7d}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Commands


def _load(cfg):
    """Return ``(panel, sample)``; ``panel`` holds the two periods used."""
    if cfg["group"] is not None:
        sp = load_staggered_csv(cfg["data"])
        g, t = int(cfg["group"]), int(cfg["period"])
        try:
            sample = staggered_transform(sp, g, t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        keep = (sp.cohort == g) | np.isposinf(sp.cohort)
        panel = PanelDataset(y1=sp.y[keep, g - 2], y2=sp.y[keep, t - 1], d=sample.d,
                             x=sp.x[keep])
        return panel, sample
    panel = load_panel_csv(cfg["data"])
    return panel, DiDSample(dy=panel.y2 - panel.y1, d=panel.d, x=panel.x)


def _trim(panel, sample, cfg):
    model = fit_logistic(sample.x, sample.d, reg=cfg["reg"], clip_eps=cfg["clip_eps"])
    keep = trim_mask(model.propensity(sample.x), float(cfg["trim"]))
    idx = np.flatnonzero(keep)
    panel = PanelDataset(y1=panel.y1[idx], y2=panel.y2[idx], d=panel.d[idx], x=panel.x[idx])
    return panel, sample.subset(idx)


def estimate_one(method, panel, sample, cfg):
    """Run one method tag and return a report row."""
    alpha = float(cfg["alpha"])
    bcfg = DRBayesConfig(B=int(cfg["draws"]), alpha=alpha, seed=int(cfg["seed"]),
                         c_varsigma=float(cfg["c_varsigma"]),
                         sample_split=bool(cfg["sample_split"]), reg=float(cfg["reg"]),
                         clip_eps=float(cfg["clip_eps"]), n_starts=int(cfg["n_starts"]))
    if method == "bayes":
        res = run_algorithm1(sample, bcfg)
    elif method == "dr-bayes":
        res = run_algorithm2(sample, bcfg)
    elif method == "or":
        res = or_estimator(sample, alpha)
    elif method == "twfe":
        res = twfe(panel, alpha)
    else:
        riesz = fit_logistic(sample.x, sample.d, reg=float(cfg["reg"]),
                             clip_eps=float(cfg["clip_eps"]))
        if method == "dr":
            res = dr_estimator(sample, riesz, _design(sample.x) @ ols_control_fit(sample), alpha)
        elif method == "ipw-ht":
            res = ipw_ht(sample, riesz, alpha)
        else:
            res = ipw_hajek(sample, riesz, alpha)
    att = getattr(res, "point", None)
    if att is None:
        att = res.estimate
    return {"method": method, "att": float(att), "ci_low": res.ci_low, "ci_high": res.ci_high,
            "ci_length": res.ci_high - res.ci_low,
            "std_err": getattr(res, "std_err", None), "n_used": int(sample.n)}


def cmd_estimate(cfg):
    try:
        panel, sample = _load(cfg)
        if cfg["trim"] is not None:
            try:
                panel, sample = _trim(panel, sample, cfg)
            except UnusableSampleError as exc:
                raise _Stage("trim", EXIT_DATA, exc) from None
            except BayesDiDError as exc:
                raise _Stage("trim", EXIT_ESTIMATION, exc) from None
        sample.require_usable()
    except (DataError, UnusableSampleError) as exc:
        raise _Stage("load", EXIT_DATA, exc) from None
    rows = []
    for m in cfg["method"]:
        try:
            rows.append(estimate_one(m, panel, sample, cfg))
        except (BayesDiDError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            raise _Stage(f"estimate {m}", EXIT_ESTIMATION, exc) from None
    _emit(estimate_report(rows, cfg["format"]), cfg["output"])
    return EXIT_OK


def cmd_simulate(cfg):
    tags = [m.replace("-", "_") for m in cfg["method"]]
    n_jobs = int(cfg["threads"] or 1)
    try:
        mc = run_monte_carlo(cfg["design_config"], tags, n_jobs=n_jobs)
    except (BayesDiDError, ArithmeticError, ValueError) as exc:
        raise _Stage("simulate", EXIT_ESTIMATION, exc) from None
    if cfg["output"]:
        atomic_write(cfg["output"], metrics_report(mc, cfg["format"]))
        sys.stdout.write(metrics_report(mc, "text"))
    else:
        sys.stdout.write(metrics_report(mc, cfg["format"]))
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        cfg = resolve_config(args.command, flags)
    except ConfigError as exc:
        print(f"bayesdid {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = cmd_estimate if args.command == "estimate" else cmd_simulate
    threads = cfg["threads"]
    try:
        if threads:
            with threadpool_limits(limits=int(threads)):
                return run(cfg)
        return run(cfg)
    except ConfigError as exc:
        print(f"bayesdid {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Stage as exc:
        print(f"bayesdid {args.command}: {exc.stage} failed: {exc.exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"bayesdid {args.command}: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
