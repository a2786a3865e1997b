"""Probability-vector arithmetic on the class simplex.

Vectors are plain float64 numpy arrays. Functions that take a batch accept a
2-D array and work along the last axis. Every reduction over classes is a
left-to-right running sum (``np.cumsum``) so results do not depend on numpy's
pairwise-summation blocking.

Logs are natural logs; divergences and entropies are in nats.
"""

import numpy as np

from .errors import (
    AllZeroVector,
    DimensionMismatch,
    EmptyVector,
    InvalidClassCount,
    LambdaOutOfRange,
    NegativeEntry,
    NotASimplex,
    UnsupportedSupport,
)

SIMPLEX_TOL = 1e-9
LOG_FLOOR = 1e-12
_TINY = np.finfo(np.float64).tiny
_EPS = np.finfo(np.float64).eps


def ordered_sum(a, axis=-1):
    """Sum along ``axis`` strictly left to right."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] == 0:
        return np.sum(a, axis=axis)
    return np.take(np.cumsum(a, axis=axis), -1, axis=axis)


def check_simplex(p, name="p"):
    """Return ``p`` as a float array, raising NotASimplex if it is not one."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or p.shape[-1] < 2:
        raise NotASimplex(f"{name} needs at least 2 classes, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NotASimplex(f"{name} has negative or non-finite entries")
    err = np.max(np.abs(ordered_sum(p) - 1.0))
    if err > SIMPLEX_TOL:
        raise NotASimplex(f"{name} sums to 1 only within {err:.3g}")
    return p


def _check_same_dim(p, q):
    if p.shape[-1] != q.shape[-1]:
        raise DimensionMismatch(f"dimension {p.shape[-1]} vs {q.shape[-1]}")


def normalize(v):
    """Scale a nonnegative vector (or each row of a batch) to sum to one.

    Rows whose sum is already 1 to within a few ulps are returned unchanged,
    which makes ``normalize`` bitwise idempotent.
    """
    v = np.array(v, dtype=np.float64)
    if v.ndim < 1 or v.shape[-1] < 2:
        raise InvalidClassCount(f"need at least 2 entries, got shape {v.shape}")
    if np.any(v < 0):
        raise NegativeEntry("normalize got a negative entry")
    s = ordered_sum(v)[..., None]
    if np.any(s == 0):
        raise AllZeroVector("cannot normalize a vector with zero mass")
    done = np.abs(s - 1.0) <= 4 * v.shape[-1] * _EPS
    return np.where(done, v, v / s)


def _safe_log(x):
    # positive-but-subnormal entries get the floor; exact zeros are masked by callers
    x = np.where((x > 0) & (x < _TINY), LOG_FLOOR, x)
    with np.errstate(divide="ignore"):
        return np.log(x)


def _xlogy_terms(p, logs):
    # p * logs where p > 0, exactly 0 elsewhere (0 * -inf would be nan)
    with np.errstate(invalid="ignore"):
        return np.where(p > 0, p * logs, 0.0)


def kl_divergence(p, q):
    """KL(p || q) in nats, with 0 * ln(0 / q) = 0."""
    p = check_simplex(p, "p")
    q = check_simplex(q, "q")
    _check_same_dim(p, q)
    if np.any((p > 0) & (q == 0)):
        raise UnsupportedSupport("q has zero mass where p is positive")
    with np.errstate(invalid="ignore"):
        terms = _xlogy_terms(p, _safe_log(p) - _safe_log(q))
    return max(float(ordered_sum(terms)), 0.0)


def entropy(p):
    """Shannon entropy in nats, with 0 * ln 0 = 0."""
    p = check_simplex(p)
    terms = -_xlogy_terms(p, _safe_log(p))
    return max(float(ordered_sum(terms)), 0.0)


def ema_update(prev, obs, lam):
    """``lam * prev + (1 - lam) * obs``."""
    if not 0.0 <= lam <= 1.0:
        raise LambdaOutOfRange(f"momentum must lie in [0, 1], got {lam}")
    prev = np.asarray(prev, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    _check_same_dim(prev, obs)
    return lam * prev + (1.0 - lam) * obs


def uniform(n_classes):
    if int(n_classes) != n_classes or n_classes < 2:
        raise InvalidClassCount(f"class count must be an integer >= 2, got {n_classes}")
    return np.full(int(n_classes), 1.0 / n_classes)


def argmax_deterministic(v):
    """Index of the largest entry; exact ties go to the lowest index.

    For a 2-D batch, returns one index per row.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyVector("argmax of an empty vector")
    # np.argmax already returns the first occurrence of the maximum
    out = np.argmax(v, axis=-1)
    return int(out) if v.ndim == 1 else out
