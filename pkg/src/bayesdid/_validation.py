"""Input checks shared by the estimator classes."""

from sklearn.utils.validation import check_array, check_consistent_length

from .data import _check_binary


def check_did_inputs(X, dy, d):
    """Validate ``(X, dy, d)`` and return float arrays.

    ``X`` may have zero columns; ``d`` must be 0/1.
    """
    X = check_array(X, ensure_min_features=0, dtype=float)
    dy = check_array(dy, ensure_2d=False, dtype=float).ravel()
    d = check_array(d, ensure_2d=False, dtype=float).ravel()
    check_consistent_length(X, dy, d)
    _check_binary(d)
    return X, dy, d
