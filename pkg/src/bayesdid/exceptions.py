"""Exception hierarchy shared by the estimation pipeline."""


class BayesDiDError(Exception):
    """Base class for every error raised by :mod:`bayesdid`."""


class DataError(BayesDiDError):
    """Malformed input data.

    ``row`` is 1-based and counts data rows (the header is row 0); either
    locator may be ``None`` when the problem is not tied to one cell.
    """

    def __init__(self, reason, row=None, column=None):
        self.reason = reason
        self.row = row
        self.column = column
        super().__init__(self._format())

    def _format(self):
        where = []
        if self.row is not None:
            where.append(f"row {self.row}")
        if self.column is not None:
            where.append(f"column {self.column!r}")
        if where:
            return f"{', '.join(where)}: {self.reason}"
        return self.reason

    @property
    def location(self):
        return (self.row, self.column, self.reason)


class UnusableSampleError(BayesDiDError):
    """Too few treated or control units left to estimate anything."""


class ConditioningError(BayesDiDError, ArithmeticError):
    """Cholesky factorisation failed even at the maximum jitter."""


class DegenerateAdjustmentError(BayesDiDError, ArithmeticError):
    """The prior adjustment has no direction (all control Riesz values vanish)."""


class ConvergenceError(BayesDiDError, RuntimeError):
    """An iterative fit did not converge."""


class DegenerateDrawError(BayesDiDError, ArithmeticError):
    """A bootstrap draw put no weight on the treated arm."""


class RankDeficiencyError(BayesDiDError, ArithmeticError):
    """A least-squares design matrix does not have full column rank."""
