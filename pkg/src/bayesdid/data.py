"""Panel ingestion and the reductions to a differenced cross-section.

Every estimator in the package consumes a :class:`DiDSample`: the outcome
change ``dy = y2 - y1``, the treatment indicator ``d`` and the covariate
matrix ``x``.  The helpers here build it from a two-period panel, from a
staggered-adoption panel (one cohort against the never-treated), and trim it
on an estimated propensity score.
"""

import csv
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, UnusableSampleError

__all__ = [
    "PanelDataset",
    "DiDSample",
    "StaggeredPanel",
    "NEVER",
    "load_panel_csv",
    "load_staggered_csv",
    "to_canonical",
    "trim_mask",
    "trim_by_propensity",
    "staggered_transform",
]

#: Cohort label of never-treated units.
NEVER = math.inf

_NEVER_TOKENS = {"never", "inf", "infinity"}


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _as_matrix(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(n, -1) if n else x.reshape(0, -1)
    if x.ndim != 2:
        raise DataError(f"covariates must be a matrix, got ndim={x.ndim}")
    return x


def _check_binary(d):
    d = np.asarray(d, dtype=float)
    bad = np.flatnonzero((d != 0) & (d != 1))
    if bad.size:
        raise DataError(f"treatment must be 0/1, got {d[bad[0]]!r}", row=int(bad[0]) + 1)
    return d.astype(np.int8)


@dataclass(frozen=True)
class PanelDataset:
    """Two-period panel: pre/post outcomes, treatment and covariates."""

    y1: np.ndarray
    y2: np.ndarray
    d: np.ndarray
    x: np.ndarray
    unit_id: np.ndarray = None

    def __post_init__(self):
        y1 = np.asarray(self.y1, dtype=float).ravel()
        n = y1.shape[0]
        y2 = np.asarray(self.y2, dtype=float).ravel()
        x = _as_matrix(self.x, n)
        d = _check_binary(np.ravel(self.d))
        if not (y2.shape[0] == d.shape[0] == x.shape[0] == n):
            raise DataError(
                f"row counts differ: y1={n}, y2={y2.shape[0]}, d={d.shape[0]}, x={x.shape[0]}"
            )
        if n < 2:
            raise DataError(f"need at least 2 units, got {n}")
        for name, arr in (("y1", y1), ("y2", y2), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        object.__setattr__(self, "y1", _frozen(y1))
        object.__setattr__(self, "y2", _frozen(y2))
        object.__setattr__(self, "d", _frozen(d, np.int8))
        object.__setattr__(self, "x", _frozen(x))
        if self.unit_id is not None:
            uid = np.asarray(self.unit_id, dtype=object).ravel()
            if uid.shape[0] != n:
                raise DataError("unit_id length differs from the outcomes")
            object.__setattr__(self, "unit_id", _frozen(uid, object))

    @property
    def n(self):
        return self.y1.shape[0]

    @property
    def p(self):
        return self.x.shape[1]


@dataclass(frozen=True)
class DiDSample:
    """Canonical differenced cross-section ``(dy, d, x)``.

    Construction only checks shapes and finiteness so that intermediate
    results (e.g. a heavily trimmed sample) can be represented; call
    :meth:`require_usable` before estimating.
    """

    dy: np.ndarray
    d: np.ndarray
    x: np.ndarray
    n_treated: int = field(init=False)
    n_control: int = field(init=False)

    def __post_init__(self):
        dy = np.asarray(self.dy, dtype=float).ravel()
        n = dy.shape[0]
        d = _check_binary(np.ravel(self.d))
        x = _as_matrix(self.x, n)
        if not (d.shape[0] == x.shape[0] == n):
            raise DataError(f"row counts differ: dy={n}, d={d.shape[0]}, x={x.shape[0]}")
        if not np.all(np.isfinite(dy)):
            raise DataError("dy contains non-finite values")
        if not np.all(np.isfinite(x)):
            raise DataError("x contains non-finite values")
        object.__setattr__(self, "dy", _frozen(dy))
        object.__setattr__(self, "d", _frozen(d, np.int8))
        object.__setattr__(self, "x", _frozen(x))
        n_t = int(d.sum())
        object.__setattr__(self, "n_treated", n_t)
        object.__setattr__(self, "n_control", n - n_t)

    @property
    def n(self):
        return self.dy.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def treated(self):
        return self.d == 1

    @property
    def control(self):
        return self.d == 0

    def require_usable(self):
        """Raise :class:`UnusableSampleError` unless the sample supports a GP fit."""
        if self.n_treated < 1 or self.n_control < 2:
            raise UnusableSampleError(
                f"need >=1 treated and >=2 control units, got "
                f"n_treated={self.n_treated}, n_control={self.n_control}"
            )
        return self

    def subset(self, mask):
        """Rows selected by a boolean mask or index array, order preserved."""
        idx = np.asarray(mask)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        else:
            idx = np.sort(idx)
        return DiDSample(self.dy[idx], self.d[idx], self.x[idx])


@dataclass(frozen=True)
class StaggeredPanel:
    """Balanced panel over periods ``1..T`` with staggered treatment adoption.

    ``cohort[i]`` is the first treated period of unit ``i`` or :data:`NEVER`.
    """

    y: np.ndarray
    cohort: np.ndarray
    x: np.ndarray
    first_period: int = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2:
            raise DataError("y must be an n x T matrix")
        n, T = y.shape
        cohort = np.asarray(self.cohort, dtype=float).ravel()
        x = _as_matrix(self.x, n)
        if cohort.shape[0] != n or x.shape[0] != n:
            raise DataError("row counts of y, cohort and x differ")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise DataError("y and x must be finite")
        finite = cohort[np.isfinite(cohort)]
        if np.any(np.isnan(cohort)) or np.any(cohort == -np.inf):
            raise DataError("cohort labels must be periods or never")
        if np.any(finite != np.round(finite)):
            raise DataError("cohort labels must be integer periods")
        S = self.first_period
        if S is None:
            S = int(finite.min()) if finite.size else 2
        S = int(S)
        if S < 2:
            raise DataError(f"earliest treatment period must be >= 2, got {S}")
        if T < S:
            raise DataError(f"need T >= S, got T={T}, S={S}")
        bad = np.flatnonzero((cohort < S) | ((cohort > T) & np.isfinite(cohort)))
        if bad.size:
            raise DataError(f"invalid cohort label {cohort[bad[0]]!r}", row=int(bad[0]) + 1)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "cohort", _frozen(cohort))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "first_period", S)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_periods(self):
        return self.y.shape[1]


# --------------------------------------------------------------------------
# CSV loading


def _read_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path} is empty; a header row is required")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(r)}", row=i)
    return header, body


def _column(header, body, name, parse=float):
    try:
        j = header.index(name)
    except ValueError:
        raise DataError("missing column", column=name) from None
    out = []
    for i, r in enumerate(body, start=1):
        cell = r[j].strip()
        if cell == "":
            raise DataError("missing value", row=i, column=name)
        try:
            v = parse(cell)
        except ValueError:
            raise DataError(f"non-numeric value {cell!r}", row=i, column=name) from None
        out.append(v)
    return out


def _numbered(header, prefix):
    pat = re.compile(rf"^{re.escape(prefix)}(\d+)$")
    hits = [(int(m.group(1)), h) for h in header if (m := pat.match(h))]
    return [h for _, h in sorted(hits)]


def _finite_col(values, name):
    arr = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise DataError("non-finite value", row=int(bad[0]) + 1, column=name)
    return arr


def _covariates(header, body, names):
    if not names:
        return np.zeros((len(body), 0))
    cols = [_finite_col(_column(header, body, c), c) for c in names]
    return np.column_stack(cols)


def load_panel_csv(path, schema=None):
    """Read a wide two-period panel from CSV.

    Parameters
    ----------
    path : str or path-like
        UTF-8 file with a header row.
    schema : dict, optional
        Maps roles to column names: ``y1``, ``y2``, ``d`` (strings), ``x``
        (list of strings) and optionally ``unit_id``.  Defaults to columns
        ``y1, y2, d`` and every ``x<k>`` column ordered by ``k``.

    Returns
    -------
    PanelDataset
    """
    header, body = _read_csv(path)
    schema = dict(schema or {})
    y1c = schema.get("y1", "y1")
    y2c = schema.get("y2", "y2")
    dc = schema.get("d", "d")
    xcols = schema.get("x")
    if xcols is None:
        xcols = _numbered(header, "x")
    if len(body) < 2:
        raise DataError(f"need at least 2 data rows, got {len(body)}")
    y1 = _finite_col(_column(header, body, y1c), y1c)
    y2 = _finite_col(_column(header, body, y2c), y2c)
    d = _column(header, body, dc)
    for i, v in enumerate(d, start=1):
        if v not in (0.0, 1.0):
            raise DataError(f"treatment must be 0 or 1, got {v!r}", row=i, column=dc)
    x = _covariates(header, body, xcols)
    uid = None
    if schema.get("unit_id"):
        uid = _column(header, body, schema["unit_id"], parse=str)
    return PanelDataset(y1=y1, y2=y2, d=d, x=x, unit_id=uid)


def _parse_cohort(cell):
    if cell.lower() in _NEVER_TOKENS:
        return NEVER
    v = float(cell)
    if v != int(v):
        raise ValueError(cell)
    return v


def load_staggered_csv(path, schema=None):
    """Read a staggered-adoption panel from CSV.

    Outcomes live in columns ``t1..tT``; ``cohort`` holds the first treated
    period or ``never``.  ``schema`` may override ``y`` (list), ``cohort``
    and ``x`` (list) column names.
    """
    header, body = _read_csv(path)
    schema = dict(schema or {})
    ycols = schema.get("y") or _numbered(header, "t")
    if not ycols:
        raise DataError("no outcome columns t1..tT found")
    cc = schema.get("cohort", "cohort")
    xcols = schema.get("x")
    if xcols is None:
        xcols = _numbered(header, "x")
    if len(body) < 2:
        raise DataError(f"need at least 2 data rows, got {len(body)}")
    y = np.column_stack([_finite_col(_column(header, body, c), c) for c in ycols])
    cohort = _column(header, body, cc, parse=_parse_cohort)
    x = _covariates(header, body, xcols)
    return StaggeredPanel(y=y, cohort=cohort, x=x, first_period=schema.get("first_period"))


# --------------------------------------------------------------------------
# Reductions


def to_canonical(panel):
    """Difference a two-period panel into ``(dy, d, x)``."""
    sample = DiDSample(dy=panel.y2 - panel.y1, d=panel.d, x=panel.x)
    return sample.require_usable()


def trim_mask(pscores, t):
    """Boolean mask of units whose propensity lies in ``(0, 1 - t]``."""
    pscores = np.asarray(pscores, dtype=float).ravel()
    if not np.all(np.isfinite(pscores)) or np.any((pscores < 0) | (pscores > 1)):
        raise ValueError("pscores must lie in [0, 1]")
    if not 0 <= t < 1:
        raise ValueError(f"trimming threshold must lie in [0, 1), got {t}")
    keep = (pscores > 0) & (pscores <= 1 - t)
    if not keep.any():
        raise UnusableSampleError(f"trimming at t={t} discards every unit")
    return keep


def trim_by_propensity(sample, pscores, t):
    """Keep units whose estimated propensity lies in ``(0, 1 - t]``."""
    pscores = np.asarray(pscores, dtype=float).ravel()
    if pscores.shape[0] != sample.n:
        raise ValueError(f"pscores has length {pscores.shape[0]}, sample has {sample.n}")
    return sample.subset(trim_mask(pscores, t))


def staggered_transform(panel, g, t):
    """Cohort ``g`` against never-treated units, outcome change ``y_t - y_{g-1}``.

    Periods are 1-based, matching the ``t1..tT`` column naming.
    """
    S, T = panel.first_period, panel.n_periods
    if not (S <= g <= T):
        raise ValueError(f"cohort g={g} outside [{S}, {T}]")
    if not (g <= t <= T):
        raise ValueError(f"period t={t} must satisfy g <= t <= T ({g} <= t <= {T})")
    in_g = panel.cohort == g
    never = np.isposinf(panel.cohort)
    if not never.any():
        raise UnusableSampleError("no never-treated units")
    if not in_g.any():
        raise UnusableSampleError(f"no units in cohort {g}")
    keep = np.flatnonzero(in_g | never)
    dy = panel.y[keep, t - 1] - panel.y[keep, g - 2]
    sample = DiDSample(dy=dy, d=in_g[keep].astype(np.int8), x=panel.x[keep])
    return sample.require_usable()
